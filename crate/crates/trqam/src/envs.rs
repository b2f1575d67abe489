//! Toy environments with known structure, behavior-dataset generation, and
//! the replay buffer backing TD updates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One `(s, a, r, s', done)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Ring buffer over transitions with FIFO eviction and uniform sampling
/// with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    write_head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            capacity: capacity.max(1),
            write_head: 0,
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.write_head] = t;
        }
        self.write_head = (self.write_head + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Uniform sampling with replacement over occupied slots.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.storage.is_empty() {
            return Err(Error::Domain("cannot sample from an empty buffer".into()));
        }
        Ok((0..batch_size)
            .map(|_| &self.storage[rng.random_range(0..self.storage.len())])
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Rebuild with a different capacity, keeping the contents (oldest first
    /// when shrinking would evict).
    pub fn into_with_capacity(self, capacity: usize) -> ReplayBuffer {
        let mut out = ReplayBuffer::new(capacity);
        let start = if self.storage.len() == self.capacity {
            self.write_head
        } else {
            0
        };
        let n = self.storage.len();
        for i in 0..n {
            out.push(self.storage[(start + i) % n].clone());
        }
        out
    }
}

/// Static description of an environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub reward_description: String,
    pub success_description: String,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Deterministic toy environment. Steps are pure functions of
/// `(state, action)`; randomness enters only through `reset`.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome;
}

/// Point mass in `[-1, 1]^2` chasing a goal. State is
/// `[px, py, gx, gy]`; the position moves by `0.1 * action` (actions clipped
/// to the unit box) and is clipped to the walls. Reward is the negative
/// distance to the goal, plus `+10` with termination once within `0.1`.
#[derive(Debug, Clone)]
pub struct PointMass2d {
    spec: EnvSpec,
}

impl Default for PointMass2d {
    fn default() -> Self {
        Self::new(40)
    }
}

impl PointMass2d {
    pub fn new(horizon: usize) -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass".into(),
                state_dim: 4,
                action_dim: 2,
                horizon,
                reward_description: "-dist(pos, goal) per step, +10 at the goal".into(),
                success_description: "dist(pos, goal) < 0.1".into(),
            },
        }
    }

    fn reset_impl(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let draw = |r: &mut dyn rand::RngCore| {
            let mut v = [0.0f64; 2];
            for x in &mut v {
                let u: f64 = rand::Rng::random(&mut *r);
                *x = u * 2.0 - 1.0;
            }
            v
        };
        loop {
            let p = draw(rng);
            let g = draw(rng);
            let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            if d >= 0.5 {
                return vec![p[0], p[1], g[0], g[1]];
            }
        }
    }
}

impl Environment for PointMass2d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.reset_impl(rng)
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let px = (state[0] + 0.1 * ax).clamp(-1.0, 1.0);
        let py = (state[1] + 0.1 * ay).clamp(-1.0, 1.0);
        let (gx, gy) = (state[2], state[3]);
        let dist = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
        let success = dist < 0.1;
        let reward = -dist + if success { 10.0 } else { 0.0 };
        StepOutcome {
            next_state: vec![px, py, gx, gy],
            reward,
            done: success,
            success,
        }
    }
}

/// One-step bandit with a bimodal reward surface over a scalar action:
/// `r(a) = exp(-(a-1)^2 / 0.02) + 0.5 exp(-(a+1)^2 / 0.02)`. The `+1` mode
/// is better; a symmetric behavior prior must pick it via the critic.
#[derive(Debug, Clone)]
pub struct BimodalBandit {
    spec: EnvSpec,
}

impl Default for BimodalBandit {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "bandit".into(),
                state_dim: 1,
                action_dim: 1,
                horizon: 1,
                reward_description: "exp(-(a-1)^2/0.02) + 0.5 exp(-(a+1)^2/0.02)".into(),
                success_description: "reward >= 0.9".into(),
            },
        }
    }
}

impl BimodalBandit {
    /// The reward surface; also the exact one-step value function.
    pub fn reward(action: f64) -> f64 {
        (-(action - 1.0).powi(2) / 0.02).exp() + 0.5 * (-(action + 1.0).powi(2) / 0.02).exp()
    }

    /// d reward / d action.
    pub fn reward_grad(action: f64) -> f64 {
        -2.0 * (action - 1.0) / 0.02 * (-(action - 1.0).powi(2) / 0.02).exp()
            + 0.5 * (-2.0 * (action + 1.0) / 0.02) * (-(action + 1.0).powi(2) / 0.02).exp()
    }
}

impl Environment for BimodalBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, _state: &[f64], action: &[f64]) -> StepOutcome {
        let r = Self::reward(action[0]);
        StepOutcome {
            next_state: vec![0.0],
            reward: r,
            done: true,
            success: r >= 0.9,
        }
    }
}

/// Which toy environment a config refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Bandit,
    PointMass,
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "bandit" => Ok(Self::Bandit),
            "pointmass" => Ok(Self::PointMass),
            other => Err(Error::Config(format!(
                "unknown env '{other}' (expected 'bandit' or 'pointmass')"
            ))),
        }
    }
}

/// Behavior policy used for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    /// Scripted suboptimal controllers with per-episode gain/noise draws;
    /// for the bandit, the symmetric two-mode action mixture.
    MixtureScripted,
    /// Uniform random actions.
    UniformNoisy,
}

impl BehaviorKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mixture-of-scripted" => Ok(Self::MixtureScripted),
            "uniform-noisy" => Ok(Self::UniformNoisy),
            other => Err(Error::Config(format!(
                "unknown behavior '{other}' (expected 'mixture-of-scripted' or 'uniform-noisy')"
            ))),
        }
    }
}

/// Standard deviation of each bandit behavior mode around +1/-1.
pub const BANDIT_MODE_STD: f64 = 0.01;

/// Roll scripted behavior in `env` for `n` transitions (bandit: `n` pulls;
/// point mass: episodes until `n` transitions are collected).
pub fn generate_behavior_dataset<R: Rng>(
    env: EnvKind,
    behavior: BehaviorKind,
    n: usize,
    rng: &mut R,
) -> Result<ReplayBuffer> {
    if n == 0 {
        return Err(Error::Domain("dataset size must be positive".into()));
    }
    let mut buf = ReplayBuffer::new(n.max(1));
    match env {
        EnvKind::Bandit => {
            let env = BimodalBandit::default();
            for _ in 0..n {
                let a = match behavior {
                    BehaviorKind::MixtureScripted => {
                        let mode = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let z: f64 = StandardNormal.sample(rng);
                        mode + BANDIT_MODE_STD * z
                    }
                    BehaviorKind::UniformNoisy => rng.random::<f64>() * 2.0 - 1.0,
                };
                let s = env.reset(rng);
                let out = env.step(&s, &[a]);
                buf.push(Transition {
                    state: s,
                    action: vec![a],
                    reward: out.reward,
                    next_state: out.next_state,
                    done: out.done,
                });
            }
        }
        EnvKind::PointMass => {
            let env = PointMass2d::default();
            let gains = [0.5, 1.5, 3.0];
            let noise_levels = [0.25, 0.5];
            while buf.len() < n {
                let mut s = env.reset(rng);
                let gain = gains[rng.random_range(0..gains.len())];
                let noise = noise_levels[rng.random_range(0..noise_levels.len())];
                for _ in 0..env.spec().horizon {
                    let a = match behavior {
                        BehaviorKind::MixtureScripted => {
                            let nx: f64 = StandardNormal.sample(rng);
                            let ny: f64 = StandardNormal.sample(rng);
                            [
                                (gain * (s[2] - s[0]) + noise * nx).clamp(-1.0, 1.0),
                                (gain * (s[3] - s[1]) + noise * ny).clamp(-1.0, 1.0),
                            ]
                        }
                        BehaviorKind::UniformNoisy => [
                            rng.random::<f64>() * 2.0 - 1.0,
                            rng.random::<f64>() * 2.0 - 1.0,
                        ],
                    };
                    let out = env.step(&s, &a);
                    buf.push(Transition {
                        state: s.clone(),
                        action: a.to_vec(),
                        reward: out.reward,
                        next_state: out.next_state.clone(),
                        done: out.done,
                    });
                    if out.done || buf.len() >= n {
                        break;
                    }
                    s = out.next_state;
                }
            }
        }
    }
    Ok(buf)
}

const DATA_MAGIC: &[u8; 4] = b"TRQD";
const DATA_VERSION: u32 = 1;

/// Write a buffer in the binary dataset format: little-endian header
/// (`TRQD`, version u32, count u64, state dim u32, action dim u32) followed
/// by packed f64 transitions with a one-byte done flag.
pub fn save_dataset(buf: &ReplayBuffer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (sd, ad) = match buf.iter().next() {
        Some(t) => (t.state.len(), t.action.len()),
        None => return Err(Error::Domain("cannot save an empty dataset".into())),
    };
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(buf.len() as u64).to_le_bytes())?;
    w.write_all(&(sd as u32).to_le_bytes())?;
    w.write_all(&(ad as u32).to_le_bytes())?;
    for t in buf.iter() {
        for &v in t.state.iter().chain(&t.action) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&t.reward.to_le_bytes())?;
        for &v in &t.next_state {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(t.done)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ReplayBuffer> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |what: &str| Error::CorruptFile {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != DATA_VERSION {
        return Err(corrupt("unsupported version"));
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4)?;
    let sd = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let ad = u32::from_le_bytes(b4) as usize;
    if sd == 0 || ad == 0 || sd > 4096 || ad > 4096 {
        return Err(corrupt("implausible dimensions"));
    }
    let mut buf = ReplayBuffer::new(count.max(1));
    let read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    for _ in 0..count {
        let state: Vec<f64> = (0..sd).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let action: Vec<f64> = (0..ad).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let reward = read_f64(&mut r)?;
        let next_state: Vec<f64> = (0..sd).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let mut done = [0u8; 1];
        r.read_exact(&mut done)?;
        buf.push(Transition {
            state,
            action,
            reward,
            next_state,
            done: done[0] != 0,
        });
    }
    Ok(buf)
}

/// Human-readable mirror of the binary dataset.
pub fn export_dataset_csv(buf: &ReplayBuffer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (sd, ad) = match buf.iter().next() {
        Some(t) => (t.state.len(), t.action.len()),
        None => return Err(Error::Domain("cannot export an empty dataset".into())),
    };
    let mut header: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
    header.extend((0..ad).map(|i| format!("a{i}")));
    header.push("r".into());
    header.extend((0..sd).map(|i| format!("sp{i}")));
    header.push("done".into());
    writeln!(w, "{}", header.join(","))?;
    for t in buf.iter() {
        let mut row: Vec<String> = t.state.iter().map(|v| v.to_string()).collect();
        row.extend(t.action.iter().map(|v| v.to_string()));
        row.push(t.reward.to_string());
        row.extend(t.next_state.iter().map(|v| v.to_string()));
        row.push(u8::from(t.done).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn pointmass_zero_action() {
        let env = PointMass2d::default();
        let s = vec![0.2, 0.2, -0.5, -0.5];
        let out = env.step(&s, &[0.0, 0.0]);
        assert_eq!(out.next_state, s);
        let dist = ((0.7f64).powi(2) * 2.0).sqrt();
        assert!((out.reward + dist).abs() < 1e-12);
        assert!(!out.done);
    }

    #[test]
    fn pointmass_at_goal_rewards_and_terminates() {
        let env = PointMass2d::default();
        let s = vec![0.5, 0.5, 0.5, 0.5];
        let out = env.step(&s, &[0.0, 0.0]);
        assert!(out.done && out.success);
        assert!((out.reward - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pointmass_clips_to_box() {
        let env = PointMass2d::default();
        let s = vec![0.99, -0.99, 0.0, 0.0];
        let out = env.step(&s, &[5.0, -5.0]);
        // Action clipped to (1, -1), then position clipped to the box.
        assert_eq!(out.next_state[0], 1.0);
        assert_eq!(out.next_state[1], -1.0);
    }

    #[test]
    fn bandit_reward_values() {
        assert!((BimodalBandit::reward(1.0) - 1.0).abs() < 1e-12);
        assert!((BimodalBandit::reward(-1.0) - 0.5).abs() < 1e-12);
        assert!(BimodalBandit::reward(0.0) < 1e-10);
    }

    #[test]
    fn bandit_reward_grad_matches_fd() {
        for a in [-1.1, -0.9, 0.3, 0.95, 1.05] {
            let eps = 1e-6;
            let fd = (BimodalBandit::reward(a + eps) - BimodalBandit::reward(a - eps)) / (2.0 * eps);
            let g = BimodalBandit::reward_grad(a);
            assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1.0), "a={a}: {g} vs {fd}");
        }
    }

    #[test]
    fn buffer_fifo_eviction() {
        let mut buf = ReplayBuffer::new(2);
        for i in 0..3 {
            buf.push(Transition {
                state: vec![i as f64],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0],
                done: false,
            });
        }
        assert_eq!(buf.len(), 2);
        let states: Vec<f64> = buf.iter().map(|t| t.state[0]).collect();
        assert!(states.contains(&1.0) && states.contains(&2.0) && !states.contains(&0.0));
        assert_eq!(buf.inserted(), 3);
    }

    #[test]
    fn buffer_sampling() {
        let mut buf = ReplayBuffer::new(8);
        buf.push(Transition {
            state: vec![7.0],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0],
            done: false,
        });
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let batch = buf.sample(4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|t| t.state[0] == 7.0));

        let empty = ReplayBuffer::new(4);
        assert!(empty.sample(1, &mut rng).is_err());

        let mut r1 = ChaCha12Rng::seed_from_u64(3);
        let mut r2 = ChaCha12Rng::seed_from_u64(3);
        for i in 0..10 {
            buf.push(Transition {
                state: vec![i as f64],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0],
                done: false,
            });
        }
        let b1: Vec<f64> = buf.sample(5, &mut r1).unwrap().iter().map(|t| t.state[0]).collect();
        let b2: Vec<f64> = buf.sample(5, &mut r2).unwrap().iter().map(|t| t.state[0]).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn bandit_dataset_is_balanced_and_reproducible() {
        let n = 5000;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let buf = generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, n, &mut rng)
            .unwrap();
        let near = |c: f64| {
            buf.iter()
                .filter(|t| (t.action[0] - c).abs() < 0.2)
                .count() as f64
                / n as f64
        };
        let (hi, lo) = (near(1.0), near(-1.0));
        assert!((0.4..=0.6).contains(&hi), "fraction near +1: {hi}");
        assert!((0.4..=0.6).contains(&lo), "fraction near -1: {lo}");

        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        let buf2 = generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, n, &mut rng2)
            .unwrap();
        assert!(buf.iter().zip(buf2.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn dataset_generation_rejects_zero_and_is_finite() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(matches!(
            generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 0, &mut rng),
            Err(Error::Domain(_))
        ));
        let buf = generate_behavior_dataset(
            EnvKind::PointMass,
            BehaviorKind::MixtureScripted,
            2000,
            &mut rng,
        )
        .unwrap();
        assert_eq!(buf.len(), 2000);
        for t in buf.iter() {
            assert!(t.state.iter().all(|v| v.is_finite()));
            assert!(t.action.iter().all(|v| v.is_finite()));
            assert!(t.reward.is_finite());
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.trqd");
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let buf =
            generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 100, &mut rng)
                .unwrap();
        save_dataset(&buf, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), buf.len());
        assert!(buf.iter().zip(loaded.iter()).all(|(a, b)| a == b));

        export_dataset_csv(&buf, &dir.path().join("data.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
        assert!(csv.starts_with("s0,a0,r,sp0,done"));
        assert_eq!(csv.lines().count(), 101);
    }
}
