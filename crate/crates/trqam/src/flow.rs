//! Flow-matching pretraining, the deterministic ODE sampler, and the
//! memoryless Euler-Maruyama SDE sampler on the optimal-transport schedule.
//!
//! The SDE sampler's diffusion coefficient is always `g(tau)`; the
//! trust-region parameter rescales the drift/diffusion split elsewhere but
//! never appears in the sampling noise itself.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BcRecord, MetricsSink};
use crate::numerics::graph::LossGraph;
use crate::numerics::{clip_global_norm, Activation, OptimizerState, ParamVector};

/// OT diffusion schedule `g(tau) = sqrt(2 (1 - tau) / tau)` on `(0, 1]`.
pub fn schedule_g(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!(
            "schedule_g requires tau in (0, 1], got {tau}; clamp first"
        )));
    }
    Ok((2.0 * (1.0 - tau) / tau).sqrt())
}

/// Uniform denoising grid `tau_k = k / K` with a clamp for the singular
/// drift and diffusion at `tau = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    num_steps: usize,
    tau_clamp: f64,
}

impl FlowSchedule {
    /// Grid with `num_steps` cells and the default clamp `h / 2`.
    pub fn new(num_steps: usize) -> Result<Self> {
        let h = 1.0 / num_steps.max(1) as f64;
        Self::with_clamp(num_steps, h / 2.0)
    }

    pub fn with_clamp(num_steps: usize, tau_clamp: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Domain("num_steps must be positive".into()));
        }
        let h = 1.0 / num_steps as f64;
        if !(tau_clamp > 0.0 && tau_clamp <= h) {
            return Err(Error::Domain(format!(
                "tau_clamp must lie in (0, {h}], got {tau_clamp}"
            )));
        }
        Ok(Self {
            num_steps,
            tau_clamp,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    pub fn tau_clamp(&self) -> f64 {
        self.tau_clamp
    }

    /// Grid point `tau_k = k / K`, exact at both endpoints.
    pub fn tau(&self, k: usize) -> f64 {
        k as f64 / self.num_steps as f64
    }

    /// Clamped grid point used wherever `1/tau` or `g(tau)` is evaluated.
    pub fn tau_clamped(&self, k: usize) -> f64 {
        self.tau(k).max(self.tau_clamp)
    }
}

/// A conditional velocity field `v(s, x, tau)` on action space.
pub trait VelocityField {
    fn action_dim(&self) -> usize;

    fn eval(&self, state: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>>;

    /// `cotangent^T * d v / d x` at fixed state and time.
    fn vjp_x(&self, state: &[f64], x: &[f64], tau: f64, cotangent: &[f64]) -> Result<Vec<f64>>;
}

/// MLP-backed velocity field over the input layout `[state, x, tau]`.
pub struct MlpVelocity<'a> {
    params: &'a ParamVector,
    state_dim: usize,
    action_dim: usize,
}

impl<'a> MlpVelocity<'a> {
    pub fn new(params: &'a ParamVector, state_dim: usize, action_dim: usize) -> Result<Self> {
        if params.input_dim() != state_dim + action_dim + 1 {
            return Err(Error::Shape(format!(
                "velocity net expects input dim {} for state {} + action {} + tau",
                params.input_dim(),
                state_dim,
                action_dim
            )));
        }
        if params.output_dim() != action_dim {
            return Err(Error::Shape(format!(
                "velocity net output dim {} does not match action dim {}",
                params.output_dim(),
                action_dim
            )));
        }
        Ok(Self {
            params,
            state_dim,
            action_dim,
        })
    }

    pub fn params(&self) -> &ParamVector {
        self.params
    }

    /// `[state, x, tau]` feature vector.
    pub fn input(&self, state: &[f64], x: &[f64], tau: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.state_dim + self.action_dim + 1);
        input.extend_from_slice(state);
        input.extend_from_slice(x);
        input.push(tau);
        input
    }
}

impl VelocityField for MlpVelocity<'_> {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn eval(&self, state: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.params.forward(&self.input(state, x, tau))
    }

    fn vjp_x(&self, state: &[f64], x: &[f64], tau: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        let full = self
            .params
            .vjp_input(&self.input(state, x, tau), cotangent)?;
        Ok(full[self.state_dim..self.state_dim + self.action_dim].to_vec())
    }
}

/// Closed-form affine field `v(x) = A x + c`, time-independent. Test and
/// oracle plumbing with an exact Jacobian.
#[derive(Debug, Clone)]
pub struct AffineVelocity {
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineVelocity {
    pub fn new(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let d = offset.len();
        if matrix.len() != d * d {
            return Err(Error::Shape(format!(
                "matrix length {} does not match offset dim {d}",
                matrix.len()
            )));
        }
        Ok(Self { matrix, offset })
    }

    pub fn constant(offset: Vec<f64>) -> Self {
        let d = offset.len();
        Self {
            matrix: vec![0.0; d * d],
            offset,
        }
    }
}

impl VelocityField for AffineVelocity {
    fn action_dim(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, _state: &[f64], x: &[f64], _tau: f64) -> Result<Vec<f64>> {
        let d = self.offset.len();
        if x.len() != d {
            return Err(Error::Shape(format!("expected x of dim {d}, got {}", x.len())));
        }
        let mut out = self.offset.clone();
        for r in 0..d {
            for c in 0..d {
                out[r] += self.matrix[r * d + c] * x[c];
            }
        }
        Ok(out)
    }

    fn vjp_x(&self, _state: &[f64], x: &[f64], _tau: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        let d = self.offset.len();
        if x.len() != d || cotangent.len() != d {
            return Err(Error::Shape("affine vjp dimension mismatch".into()));
        }
        let mut out = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                out[c] += self.matrix[r * d + c] * cotangent[r];
            }
        }
        Ok(out)
    }
}

/// Velocity field from closures; used by tests to inject oracle fields.
pub struct FnVelocity<E, V>
where
    E: Fn(&[f64], &[f64], f64) -> Vec<f64>,
    V: Fn(&[f64], &[f64], f64, &[f64]) -> Vec<f64>,
{
    pub dim: usize,
    pub eval_fn: E,
    pub vjp_fn: V,
}

impl<E, V> VelocityField for FnVelocity<E, V>
where
    E: Fn(&[f64], &[f64], f64) -> Vec<f64>,
    V: Fn(&[f64], &[f64], f64, &[f64]) -> Vec<f64>,
{
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, state: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
        Ok((self.eval_fn)(state, x, tau))
    }

    fn vjp_x(&self, state: &[f64], x: &[f64], tau: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        Ok((self.vjp_fn)(state, x, tau, cotangent))
    }
}

/// One recorded denoising path: points `X_{tau_0..tau_K}`, the Gaussian
/// noises that drove it, the conditioning state, and the trust-region value
/// in effect when it was sampled (metadata; the noise scale never depends on
/// it).
#[derive(Debug, Clone)]
pub struct DenoisingTrajectory {
    pub state: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub lambda_used: f64,
    pub schedule: FlowSchedule,
}

impl DenoisingTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.points.last().unwrap()
    }
}

/// One Euler step of the memoryless SDE:
/// `X' = X + h (2 v(s, X, tau~) - X / tau~) + sqrt(h) g(tau~) eps`.
pub fn sde_step(
    v: &dyn VelocityField,
    state: &[f64],
    x: &[f64],
    k: usize,
    schedule: &FlowSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let h = schedule.step_size();
    let tau = schedule.tau_clamped(k);
    let g = schedule_g(tau)?;
    let vel = v.eval(state, x, tau)?;
    let mut next = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        next.push(x[i] + h * (2.0 * vel[i] - x[i] / tau) + h.sqrt() * g * noise[i]);
    }
    Ok(next)
}

/// Sample one trajectory of the memoryless SDE, recording all noises so the
/// path can be replayed bit-exactly.
pub fn sample_memoryless_sde<R: Rng + ?Sized>(
    v_ft: &dyn VelocityField,
    state: &[f64],
    schedule: &FlowSchedule,
    lambda_used: f64,
    rng: &mut R,
) -> Result<DenoisingTrajectory> {
    let d = v_ft.action_dim();
    let k_steps = schedule.num_steps();
    let mut points = Vec::with_capacity(k_steps + 1);
    let mut noises = Vec::with_capacity(k_steps);
    let x0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    points.push(x0);
    for k in 0..k_steps {
        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let next = sde_step(v_ft, state, &points[k], k, schedule, &eps)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalDivergence {
                step: k,
                what: "SDE trajectory point is not finite".into(),
            });
        }
        noises.push(eps);
        points.push(next);
    }
    Ok(DenoisingTrajectory {
        state: state.to_vec(),
        points,
        noises,
        lambda_used,
        schedule: *schedule,
    })
}

/// Re-run the SDE recursion from a trajectory's initial point and recorded
/// noises. Bit-identical to the original points when the same field is used.
pub fn replay_trajectory(
    v: &dyn VelocityField,
    traj: &DenoisingTrajectory,
) -> Result<Vec<Vec<f64>>> {
    let mut points = vec![traj.points[0].clone()];
    for k in 0..traj.schedule.num_steps() {
        let next = sde_step(v, &traj.state, &points[k], k, &traj.schedule, &traj.noises[k])?;
        points.push(next);
    }
    Ok(points)
}

/// Deterministic Euler integration of `dX = v(s, X, tau) dtau` from `x0`;
/// returns `X_1`.
pub fn sample_ode(
    v: &dyn VelocityField,
    state: &[f64],
    x0: &[f64],
    schedule: &FlowSchedule,
) -> Result<Vec<f64>> {
    let h = schedule.step_size();
    let mut x = x0.to_vec();
    for k in 0..schedule.num_steps() {
        let vel = v.eval(state, &x, schedule.tau(k))?;
        for i in 0..x.len() {
            x[i] += h * vel[i];
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::NumericalDivergence {
                step: k,
                what: "ODE state is not finite".into(),
            });
        }
    }
    Ok(x)
}

/// One flow-matching regression sample on the straight-line path.
#[derive(Debug, Clone)]
pub struct FmSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub x0: Vec<f64>,
    pub tau: f64,
}

impl FmSample {
    pub fn x_tau(&self) -> Vec<f64> {
        self.x0
            .iter()
            .zip(&self.action)
            .map(|(x0, a)| (1.0 - self.tau) * x0 + self.tau * a)
            .collect()
    }

    /// Regression target `a - x0`.
    pub fn target(&self) -> Vec<f64> {
        self.action.iter().zip(&self.x0).map(|(a, x0)| a - x0).collect()
    }
}

/// Draw `X_0 ~ N(0, I)` and `tau ~ U(0, 1)` for each pair in the batch.
pub fn draw_fm_samples<R: Rng + ?Sized>(batch: &[(Vec<f64>, Vec<f64>)], rng: &mut R) -> Vec<FmSample> {
    batch
        .iter()
        .map(|(s, a)| {
            let x0: Vec<f64> = (0..a.len()).map(|_| StandardNormal.sample(rng)).collect();
            let tau: f64 = rng.random();
            FmSample {
                state: s.clone(),
                action: a.clone(),
                x0,
                tau,
            }
        })
        .collect()
}

/// Mean squared regression error of a field against the straight-line
/// velocity targets.
pub fn fm_loss_value(v: &dyn VelocityField, samples: &[FmSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("flow-matching loss over empty batch".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = v.eval(&s.state, &s.x_tau(), s.tau)?;
        let target = s.target();
        total += pred
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Flow-matching loss of an MLP field on a freshly drawn batch.
pub fn fm_loss<R: Rng + ?Sized>(
    params: &ParamVector,
    state_dim: usize,
    batch: &[(Vec<f64>, Vec<f64>)],
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("flow-matching loss over empty batch".into()));
    }
    let action_dim = batch[0].1.len();
    let v = MlpVelocity::new(params, state_dim, action_dim)?;
    let samples = draw_fm_samples(batch, rng);
    fm_loss_value(&v, &samples)
}

/// Loss and exact parameter gradient of the flow-matching objective on a
/// fixed sample set.
pub fn fm_loss_grad(
    params: &ParamVector,
    state_dim: usize,
    samples: &[FmSample],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Domain("flow-matching loss over empty batch".into()));
    }
    let action_dim = samples[0].action.len();
    let v = MlpVelocity::new(params, state_dim, action_dim)?;
    let mut g = LossGraph::new(params);
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let input = g.constant(v.input(&s.state, &s.x_tau(), s.tau));
        let out = g.network(input)?;
        let target = g.constant(s.target());
        let diff = g.sub(out, target)?;
        terms.push(g.squared_norm(diff));
    }
    let loss = g.mean(&terms)?;
    Ok((g.scalar_value(loss)?, g.grad_params(loss)?))
}

/// Behavior-cloning configuration for [`pretrain_bc`].
#[derive(Debug, Clone)]
pub struct BcConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_max_norm: f64,
    pub seed: u64,
}

impl BcConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.state_dim + self.action_dim + 1];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.action_dim);
        sizes
    }
}

/// Pretrain a velocity field by flow-matching regression on buffer actions.
pub fn pretrain_bc(
    dataset: &crate::envs::ReplayBuffer,
    cfg: &BcConfig,
    sink: &mut MetricsSink,
) -> Result<ParamVector> {
    use rand::SeedableRng;
    if dataset.len() == 0 {
        return Err(Error::Domain("behavior cloning needs a non-empty dataset".into()));
    }
    let mut params = crate::numerics::mlp_init(&cfg.layer_sizes(), cfg.activation, cfg.seed)?;
    let mut opt = OptimizerState::new(params.len(), cfg.learning_rate);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b9));
    for step in 0..cfg.steps {
        let batch: Vec<(Vec<f64>, Vec<f64>)> = dataset
            .sample(cfg.batch_size, &mut rng)?
            .into_iter()
            .map(|t| (t.state.clone(), t.action.clone()))
            .collect();
        let samples = draw_fm_samples(&batch, &mut rng);
        let (loss, grads) = fm_loss_grad(&params, cfg.state_dim, &samples)?;
        let clipped = clip_global_norm(&grads, cfg.clip_max_norm)?;
        opt.step(&mut params, &clipped)?;
        sink.emit(&BcRecord {
            step: step as u64,
            bc_loss: loss,
        })?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn schedule_values() {
        assert!((schedule_g(0.5).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(schedule_g(1.0).unwrap(), 0.0);
        assert!((schedule_g(0.2).unwrap() - 8f64.sqrt()).abs() < 1e-12);
        assert!(schedule_g(0.0).is_err());
        assert!(schedule_g(-0.1).is_err());
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 1..=100 {
            let tau = i as f64 / 100.0;
            let g = schedule_g(tau).unwrap();
            assert!(g < prev, "g not strictly decreasing at tau={tau}");
            prev = g;
        }
        assert_eq!(schedule_g(1.0).unwrap(), 0.0);
    }

    #[test]
    fn grid_is_exact() {
        let s = FlowSchedule::new(10).unwrap();
        assert_eq!(s.tau(0), 0.0);
        assert_eq!(s.tau(10), 1.0);
        assert_eq!(s.tau_clamped(0), 0.05);
        assert_eq!(s.tau_clamped(1), 0.1);
        assert!(FlowSchedule::with_clamp(10, 0.2).is_err());
        assert!(FlowSchedule::with_clamp(10, 0.0).is_err());
    }

    #[test]
    fn ode_zero_field_returns_x0() {
        let v = AffineVelocity::constant(vec![0.0, 0.0]);
        let s = FlowSchedule::new(10).unwrap();
        let x = sample_ode(&v, &[], &[0.3, -0.7], &s).unwrap();
        assert_eq!(x, vec![0.3, -0.7]);
    }

    #[test]
    fn ode_constant_field_is_exact() {
        let v = AffineVelocity::constant(vec![1.5, -0.5]);
        let s = FlowSchedule::new(10).unwrap();
        let x = sample_ode(&v, &[], &[0.1, 0.2], &s).unwrap();
        assert!((x[0] - 1.6).abs() < 1e-12 && (x[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn ode_linear_field_matches_discrete_recursion() {
        // v(x) = x gives the Euler closed form (1 + h)^K x0.
        let v = AffineVelocity::new(vec![1.0], vec![0.0]).unwrap();
        let s = FlowSchedule::new(10).unwrap();
        let x0 = 0.37;
        let x = sample_ode(&v, &[], &[x0], &s).unwrap();
        let want = (1.0 + s.step_size()).powi(10) * x0;
        assert!((x[0] - want).abs() <= 1e-12 * want.abs());
    }

    #[test]
    fn sde_drift_cancellation_keeps_path_constant() {
        // v(x, tau) = x / (2 tau~) makes the drift vanish; with zero noise the
        // path is constant.
        let v = FnVelocity {
            dim: 2,
            eval_fn: |_s: &[f64], x: &[f64], tau: f64| x.iter().map(|xi| xi / (2.0 * tau)).collect(),
            vjp_fn: |_s: &[f64], _x: &[f64], tau: f64, c: &[f64]| {
                c.iter().map(|ci| ci / (2.0 * tau)).collect()
            },
        };
        let s = FlowSchedule::new(10).unwrap();
        let x0 = vec![0.4, -1.2];
        let mut x = x0.clone();
        for k in 0..10 {
            x = sde_step(&v, &[], &x, k, &s, &[0.0, 0.0]).unwrap();
        }
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sde_replay_is_bit_exact() {
        let params = crate::numerics::mlp_init(&[4, 16, 2], Activation::Gelu, 3).unwrap();
        let v = MlpVelocity::new(&params, 1, 2).unwrap();
        let s = FlowSchedule::new(10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let traj = sample_memoryless_sde(&v, &[0.5], &s, 1.0, &mut rng).unwrap();
        let replayed = replay_trajectory(&v, &traj).unwrap();
        assert_eq!(traj.points, replayed);
        assert_eq!(traj.points.len(), 11);
        assert_eq!(traj.noises.len(), 10);
    }

    #[test]
    fn sde_paths_do_not_depend_on_lambda() {
        let params = crate::numerics::mlp_init(&[4, 16, 2], Activation::Gelu, 3).unwrap();
        let v = MlpVelocity::new(&params, 1, 2).unwrap();
        let s = FlowSchedule::new(10).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let t1 = sample_memoryless_sde(&v, &[0.5], &s, 0.25, &mut r1).unwrap();
        let t2 = sample_memoryless_sde(&v, &[0.5], &s, 4.0, &mut r2).unwrap();
        assert_eq!(t1.points, t2.points);
        assert_eq!(t1.noises, t2.noises);
        assert_ne!(t1.lambda_used, t2.lambda_used);
    }

    /// Conditional straight-line velocity for a 1-D Gaussian target
    /// `N(mean, std^2)` from a standard normal source.
    pub(crate) fn gaussian_oracle_velocity(
        mean: f64,
        std: f64,
    ) -> impl Fn(&[f64], &[f64], f64) -> Vec<f64> {
        move |_s: &[f64], x: &[f64], tau: f64| {
            let a = 1.0 - tau;
            let b = tau;
            let denom = a * a + b * b * std * std;
            let alpha = (b * std * std - a) / denom;
            vec![mean + alpha * (x[0] - b * mean)]
        }
    }

    /// Exact mean/variance recursion of the discretized memoryless SDE for a
    /// velocity that is affine in x: v(x, tau) = alpha(tau) x + gamma(tau).
    fn discrete_sde_moments(
        mean: f64,
        std: f64,
        schedule: &FlowSchedule,
    ) -> (f64, f64) {
        let h = schedule.step_size();
        let (mut m, mut var) = (0.0, 1.0);
        for k in 0..schedule.num_steps() {
            let tau = schedule.tau_clamped(k);
            let a = 1.0 - tau;
            let b = tau;
            let denom = a * a + b * b * std * std;
            let alpha = (b * std * std - a) / denom;
            let gamma = mean - alpha * b * mean;
            let g = schedule_g(tau).unwrap();
            // X' = X (1 + h (2 alpha - 1/tau)) + 2 h gamma + sqrt(h) g eps
            let lin = 1.0 + h * (2.0 * alpha - 1.0 / tau);
            m = lin * m + 2.0 * h * gamma;
            var = lin * lin * var + h * g * g;
        }
        (m, var)
    }

    #[test]
    fn sde_marginals_match_gaussian_oracle() {
        // Empirical terminal moments vs the exact discrete-chain recursion
        // (Monte-Carlo error only), plus proximity of the discrete chain to
        // the continuous-time target and to the discrete ODE marginals.
        let (mean, std) = (0.8, 0.6);
        let schedule = FlowSchedule::new(10).unwrap();
        let vf = gaussian_oracle_velocity(mean, std);
        let v = FnVelocity {
            dim: 1,
            eval_fn: &vf,
            vjp_fn: |_s: &[f64], _x: &[f64], _t: f64, _c: &[f64]| vec![0.0],
        };
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let t = sample_memoryless_sde(&v, &[], &schedule, 1.0, &mut rng).unwrap();
            let x1 = t.terminal()[0];
            sum += x1;
            sumsq += x1 * x1;
        }
        let emp_mean = sum / n as f64;
        let emp_var = sumsq / n as f64 - emp_mean * emp_mean;

        let (chain_mean, chain_var) = discrete_sde_moments(mean, std, &schedule);
        let se_mean = (chain_var / n as f64).sqrt();
        let se_var = chain_var * (2.0 / n as f64).sqrt();
        assert!(
            (emp_mean - chain_mean).abs() <= 3.0 * se_mean,
            "mean {emp_mean} vs chain {chain_mean} (3se {:.3e})",
            3.0 * se_mean
        );
        assert!(
            (emp_var - chain_var).abs() <= 3.0 * se_var,
            "var {emp_var} vs chain {chain_var} (3se {:.3e})",
            3.0 * se_var
        );

        // The K=10 discrete chain sits near the continuous target.
        assert!((chain_mean - mean).abs() < 0.05, "chain mean {chain_mean}");
        assert!((chain_var - std * std).abs() < 0.08, "chain var {chain_var}");

        // Memoryless equivalence: discrete ODE terminal moments agree with the
        // discrete SDE moments up to discretization error.
        let mut rng = ChaCha12Rng::seed_from_u64(321);
        let m_ode = {
            let n_ode = 50_000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n_ode {
                let x0: f64 = StandardNormal.sample(&mut rng);
                let x1 = sample_ode(&v, &[], &[x0], &schedule).unwrap()[0];
                sum += x1;
                sumsq += x1 * x1;
            }
            let m = sum / n_ode as f64;
            (m, sumsq / n_ode as f64 - m * m)
        };
        assert!((m_ode.0 - chain_mean).abs() < 0.05, "ode mean {}", m_ode.0);
        assert!((m_ode.1 - chain_var).abs() < 0.1, "ode var {}", m_ode.1);
    }

    #[test]
    fn fm_loss_perfect_regressor_is_zero() {
        // With a = 0 the conditional target a - x0 equals -x_tau / (1 - tau).
        let v = FnVelocity {
            dim: 1,
            eval_fn: |_s: &[f64], x: &[f64], tau: f64| vec![-x[0] / (1.0 - tau)],
            vjp_fn: |_s: &[f64], _x: &[f64], _t: f64, _c: &[f64]| vec![0.0],
        };
        let batch: Vec<(Vec<f64>, Vec<f64>)> =
            (0..64).map(|_| (vec![0.0], vec![0.0])).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let samples = draw_fm_samples(&batch, &mut rng);
        let loss = fm_loss_value(&v, &samples).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn fm_loss_zero_field_approaches_dimension() {
        // v = 0, a = 0: loss -> E||X_0||^2 = d.
        let d = 3;
        let v = AffineVelocity::constant(vec![0.0; d]);
        let batch: Vec<(Vec<f64>, Vec<f64>)> =
            (0..200_000).map(|_| (vec![], vec![0.0; d])).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let samples = draw_fm_samples(&batch, &mut rng);
        let loss = fm_loss_value(&v, &samples).unwrap();
        // Var of each ||X_0||^2 term is 2d; SE = sqrt(2d/n).
        let se = (2.0 * d as f64 / batch.len() as f64).sqrt();
        assert!(
            (loss - d as f64).abs() <= 4.0 * se,
            "loss {loss} vs {d} (se {se:.4})"
        );
    }

    #[test]
    fn fm_loss_constant_field_bias_variance() {
        // v = c, a = 0: loss -> ||c||^2 + d.
        let c = vec![0.7, -0.3];
        let d = 2;
        let v = AffineVelocity::constant(c.clone());
        let batch: Vec<(Vec<f64>, Vec<f64>)> =
            (0..200_000).map(|_| (vec![], vec![0.0; d])).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let samples = draw_fm_samples(&batch, &mut rng);
        let loss = fm_loss_value(&v, &samples).unwrap();
        let want = c.iter().map(|x| x * x).sum::<f64>() + d as f64;
        let se = ((2.0 * d as f64 + 4.0 * want) / batch.len() as f64).sqrt();
        assert!(
            (loss - want).abs() <= 4.0 * se,
            "loss {loss} vs {want} (se {se:.4})"
        );
    }

    #[test]
    fn fm_grad_matches_finite_differences() {
        let params = crate::numerics::mlp_init(&[4, 6, 2], Activation::Tanh, 21).unwrap();
        let batch: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![0.2], vec![0.5, -0.5]),
            (vec![-0.4], vec![1.0, 0.0]),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let samples = draw_fm_samples(&batch, &mut rng);
        let (_, grad) = fm_loss_grad(&params, 1, &samples).unwrap();
        let eps = 1e-5;
        let mut p = params.clone();
        for i in 0..p.len() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + eps;
            let v = MlpVelocity::new(&p, 1, 2).unwrap();
            let lp = fm_loss_value(&v, &samples).unwrap();
            p.values_mut()[i] = orig - eps;
            let v = MlpVelocity::new(&p, 1, 2).unwrap();
            let lm = fm_loss_value(&v, &samples).unwrap();
            p.values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel <= 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }
}
