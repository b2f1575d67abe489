//! Calibration runs for the acceptance thresholds. Not part of the test
//! suite; run with `cargo run --release -p trqam --example pilot [which]`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use trqam::critic::CriticFn;
use trqam::envs::{
    generate_behavior_dataset, BehaviorKind, BimodalBandit, EnvKind, PointMass2d,
};
use trqam::error::Result;
use trqam::flow::{pretrain_bc, BcConfig};
use trqam::metrics::MetricsSink;
use trqam::numerics::Activation;
use trqam::trainer::{
    evaluate_policy, run_phase, EpsKlSchedule, EvalMode, EvalOptions, Phase, TrainerOptions,
    TrainerState, Variant,
};

struct AdversarialBanditCritic {
    amplitude: f64,
    frequency: f64,
}

impl CriticFn for AdversarialBanditCritic {
    fn value(&self, _s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(BimodalBandit::reward(a[0]) + self.amplitude * (self.frequency * a[0]).sin())
    }
    fn action_gradient(&self, _s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![
            BimodalBandit::reward_grad(a[0])
                + self.amplitude * self.frequency * (self.frequency * a[0]).cos(),
        ])
    }
}

fn bandit_bc(seed: u64, bc_steps: usize) -> trqam::numerics::ParamVector {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xDA7A_5E77);
    let data = generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 20_000, &mut rng)
        .unwrap();
    let bc = BcConfig {
        state_dim: 1,
        action_dim: 1,
        hidden: vec![64, 64],
        activation: Activation::Gelu,
        steps: bc_steps,
        batch_size: 64,
        learning_rate: 3e-4,
        clip_max_norm: 1.0,
        seed,
    };
    let mut sink = MetricsSink::memory();
    pretrain_bc(&data, &bc, &mut sink).unwrap()
}

fn pilot_bandit_bc() {
    for bc_steps in [1000usize, 2000, 4000] {
        let v = bandit_bc(7, bc_steps);
        let env = BimodalBandit::default();
        let schedule = trqam::flow::FlowSchedule::new(10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let (ret, _) =
            evaluate_policy(&v, 1, 1, &env, &schedule, 2000, &mut rng, EvalMode::Sde).unwrap();
        // Mode coverage.
        let mut hi = 0;
        let mut lo = 0;
        let n = 2000;
        let vfield = trqam::flow::MlpVelocity::new(&v, 1, 1).unwrap();
        for _ in 0..n {
            let t = trqam::flow::sample_memoryless_sde(&vfield, &[0.0], &schedule, 1.0, &mut rng)
                .unwrap();
            let a = t.terminal()[0];
            if (a - 1.0).abs() < 0.2 {
                hi += 1;
            }
            if (a + 1.0).abs() < 0.2 {
                lo += 1;
            }
        }
        println!(
            "bc_steps {bc_steps}: mean reward {ret:.4}, mode+1 {:.3}, mode-1 {:.3}",
            hi as f64 / n as f64,
            lo as f64 / n as f64
        );
    }
}

fn trqam_options(eps: f64, seed: u64, eta: f64, rho: f64) -> TrainerOptions {
    TrainerOptions {
        variant: Variant::Trqam,
        seed,
        eps_kl: EpsKlSchedule::constant(eps),
        eta_lambda: eta,
        rho_ema: rho,
        critic_hidden: vec![64, 64],
        ..TrainerOptions::default()
    }
}

fn pilot_kl_tracking(eta: f64, rho: f64, offline: usize, online: usize) {
    println!("== eta {eta}, rho {rho} ==");
    let v_base = bandit_bc(7, 2000);
    for eps in [0.1, 0.5, 1.0] {
        let mut rng = ChaCha12Rng::seed_from_u64(0xDA7A);
        let data =
            generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 20_000, &mut rng)
                .unwrap()
                .into_with_capacity(60_000);
        let opts = trqam_options(eps, 11, eta, rho);
        let mut state = TrainerState::new(v_base.clone(), 1, 1, data, &opts).unwrap();
        let env = BimodalBandit::default();
        let mut sink = MetricsSink::memory();
        run_phase(
            &mut state,
            Phase::Offline,
            offline,
            Some(&env),
            None,
            &EvalOptions { interval: 0, episodes: 1, mode: EvalMode::Sde },
            &mut sink,
        )
        .unwrap();
        run_phase(
            &mut state,
            Phase::Online,
            online,
            Some(&env),
            None,
            &EvalOptions { interval: 0, episodes: 1, mode: EvalMode::Sde },
            &mut sink,
        )
        .unwrap();

        // Parse kl_ema curve.
        let emas: Vec<f64> = sink
            .lines()
            .iter()
            .filter(|l| l.contains("\"variant\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["kl_ema"].as_f64().unwrap()
            })
            .collect();
        let lambdas: Vec<f64> = sink
            .lines()
            .iter()
            .filter(|l| l.contains("\"variant\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["lambda"].as_f64().unwrap()
            })
            .collect();
        let first_cross = emas.iter().position(|&d| (d - eps).abs() <= 0.1 * eps);
        let window = 250usize;
        let mut worst: f64 = 0.0;
        if let Some(fc) = first_cross {
            let mut i = fc;
            while i + window <= emas.len() {
                let m: f64 = emas[i..i + window].iter().sum::<f64>() / window as f64;
                worst = worst.max((m - eps).abs() / eps);
                i += window / 2;
            }
        }
        let tail_mean: f64 = emas[emas.len().saturating_sub(500)..].iter().sum::<f64>()
            / emas[emas.len().saturating_sub(500)..].len() as f64;
        let mut eval_rng = ChaCha12Rng::seed_from_u64(99);
        let schedule = trqam::flow::FlowSchedule::new(10).unwrap();
        let (ret, _) = evaluate_policy(
            &state.v_ft, 1, 1, &env, &schedule, 1000, &mut eval_rng, EvalMode::Sde,
        )
        .unwrap();
        println!(
            "eps {eps}: first_cross {:?}, worst window dev {:.3}, tail kl_ema {:.4}, lambda end {:.4}, lambda range [{:.4},{:.4}], reward {:.4}",
            first_cross,
            worst,
            tail_mean,
            lambdas.last().unwrap(),
            lambdas.iter().cloned().fold(f64::INFINITY, f64::min),
            lambdas.iter().cloned().fold(0.0, f64::max),
            ret = ret
        );
    }
}

fn pilot_adversarial() {
    let v_base = bandit_bc(7, 2000);
    let env = BimodalBandit::default();
    let schedule = trqam::flow::FlowSchedule::new(10).unwrap();
    let mut eval_rng = ChaCha12Rng::seed_from_u64(99);
    let (bc_ret, _) =
        evaluate_policy(&v_base, 1, 1, &env, &schedule, 2000, &mut eval_rng, EvalMode::Sde)
            .unwrap();
    println!("BC prior reward: {bc_ret:.4}");

    let critic = AdversarialBanditCritic { amplitude: 0.3, frequency: 40.0 };
    for (variant, beta, eps) in [
        (Variant::QamFixed, 5.0, 0.5),
        (Variant::Trqam, 1.0, 0.5),
        (Variant::ExternalKl, 1.0, 0.1),
        (Variant::Trqam, 1.0, 0.1),
    ] {
        let mut rng = ChaCha12Rng::seed_from_u64(0xDA7A);
        let data =
            generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 20_000, &mut rng)
                .unwrap()
                .into_with_capacity(60_000);
        let opts = TrainerOptions {
            variant,
            beta,
            seed: 11,
            eps_kl: EpsKlSchedule::constant(eps),
            halt_on_divergence: false,
            critic_hidden: vec![64, 64],
            ..TrainerOptions::default()
        };
        let mut state = TrainerState::new(v_base.clone(), 1, 1, data, &opts).unwrap();
        let mut sink = MetricsSink::memory();
        run_phase(
            &mut state,
            Phase::Offline,
            2000,
            Some(&env),
            Some(&critic),
            &EvalOptions { interval: 0, episodes: 1, mode: EvalMode::Sde },
            &mut sink,
        )
        .unwrap();
        let emas: Vec<f64> = sink
            .lines()
            .iter()
            .filter(|l| l.contains("\"variant\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["kl_ema"].as_f64().unwrap()
            })
            .collect();
        let max_ema = emas.iter().cloned().fold(0.0f64, f64::max);
        let mut eval_rng = ChaCha12Rng::seed_from_u64(99);
        let ret = evaluate_policy(
            &state.v_ft, 1, 1, &env, &schedule, 1000, &mut eval_rng, EvalMode::Sde,
        )
        .map(|r| r.0);
        println!(
            "{:?} beta {beta} eps {eps}: max kl_ema {max_ema:.3} ({}x budget), diverged {}, reward {:?}",
            variant,
            max_ema / eps,
            state.diverged_steps,
            ret
        );
    }
}

fn pilot_pointmass() {
    for seed in [1u64, 2] {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xDA7A_5E77);
        let data = generate_behavior_dataset(
            EnvKind::PointMass,
            BehaviorKind::MixtureScripted,
            20_000,
            &mut rng,
        )
        .unwrap();
        let bc = BcConfig {
            state_dim: 4,
            action_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Gelu,
            steps: 2000,
            batch_size: 64,
            learning_rate: 3e-4,
            clip_max_norm: 1.0,
            seed,
        };
        let mut sink = MetricsSink::memory();
        let v_base = pretrain_bc(&data, &bc, &mut sink).unwrap();
        let env = PointMass2d::default();
        let schedule = trqam::flow::FlowSchedule::new(10).unwrap();
        let mut eval_rng = ChaCha12Rng::seed_from_u64(seed ^ 99);
        let (bc_ret, bc_succ) =
            evaluate_policy(&v_base, 4, 2, &env, &schedule, 200, &mut eval_rng, EvalMode::Sde)
                .unwrap();

        let opts = TrainerOptions {
            variant: Variant::Trqam,
            seed,
            eps_kl: EpsKlSchedule::constant(1.0),
            critic_hidden: vec![64, 64],
            discount: 0.95,
            ..TrainerOptions::default()
        };
        let mut state =
            TrainerState::new(v_base.clone(), 4, 2, data.into_with_capacity(60_000), &opts)
                .unwrap();
        let mut sink = MetricsSink::memory();
        run_phase(
            &mut state,
            Phase::Offline,
            3000,
            Some(&env),
            None,
            &EvalOptions { interval: 0, episodes: 1, mode: EvalMode::Sde },
            &mut sink,
        )
        .unwrap();
        let mut eval_rng = ChaCha12Rng::seed_from_u64(seed ^ 99);
        let (ft_ret, ft_succ) = evaluate_policy(
            &state.v_ft, 4, 2, &env, &schedule, 200, &mut eval_rng, EvalMode::Sde,
        )
        .unwrap();
        println!(
            "seed {seed}: BC success {bc_succ:.3} (ret {bc_ret:.2}) -> TRQAM success {ft_succ:.3} (ret {ft_ret:.2})"
        );
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let t0 = std::time::Instant::now();
    match which.as_str() {
        "bc" => pilot_bandit_bc(),
        "bcgrid" => pilot_bc_grid(),
        "bccap" => pilot_bc_capacity(),
        "kl" => pilot_kl_tracking(0.1, 0.01, 2000, 2000),
        "kl2" => {
            pilot_kl_tracking(0.05, 0.02, 2000, 2000);
        }
        "adv" => pilot_adversarial(),
        "frozen" => pilot_frozen_lambda(),
        "pm" => pilot_pointmass(),
        _ => {
            pilot_bandit_bc();
            pilot_kl_tracking(0.1, 0.01, 2000, 2000);
            pilot_adversarial();
            pilot_pointmass();
        }
    }
    eprintln!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
}

#[allow(dead_code)]
fn pilot_bc_grid() {
    let v = bandit_bc(7, 4000);
    let env = BimodalBandit::default();
    for k in [10usize, 20, 25, 50, 100] {
        let schedule = trqam::flow::FlowSchedule::new(k).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let (ret, _) =
            evaluate_policy(&v, 1, 1, &env, &schedule, 2000, &mut rng, EvalMode::Sde).unwrap();
        let vfield = trqam::flow::MlpVelocity::new(&v, 1, 1).unwrap();
        let (mut hi, mut lo) = (0, 0);
        let n = 2000;
        for _ in 0..n {
            let t = trqam::flow::sample_memoryless_sde(&vfield, &[0.0], &schedule, 1.0, &mut rng)
                .unwrap();
            let a = t.terminal()[0];
            if (a - 1.0).abs() < 0.2 { hi += 1; }
            if (a + 1.0).abs() < 0.2 { lo += 1; }
        }
        let mut rng2 = ChaCha12Rng::seed_from_u64(55);
        let (ret_ode, _) =
            evaluate_policy(&v, 1, 1, &env, &schedule, 2000, &mut rng2, EvalMode::Ode).unwrap();
        println!(
            "K {k}: sde reward {ret:.4} (ode {ret_ode:.4}), mode+1 {:.3}, mode-1 {:.3}",
            hi as f64 / n as f64, lo as f64 / n as f64
        );
    }
}

#[allow(dead_code)]
fn pilot_bc_capacity() {
    for (hidden, steps) in [
        (vec![64usize, 64], 8000usize),
        (vec![128, 128], 8000),
        (vec![128, 128], 16000),
        (vec![96, 96], 12000),
    ] {
        let mut rng = ChaCha12Rng::seed_from_u64(0xDA7A_5E77 ^ 7);
        let data = generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 20_000, &mut rng).unwrap();
        let bc = BcConfig {
            state_dim: 1, action_dim: 1,
            hidden: hidden.clone(),
            activation: Activation::Gelu,
            steps, batch_size: 64, learning_rate: 3e-4, clip_max_norm: 1.0, seed: 7,
        };
        let mut sink = MetricsSink::memory();
        let v = pretrain_bc(&data, &bc, &mut sink).unwrap();
        let env = BimodalBandit::default();
        for k in [25usize, 50] {
            let schedule = trqam::flow::FlowSchedule::new(k).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let (ret, _) = evaluate_policy(&v, 1, 1, &env, &schedule, 2000, &mut rng, EvalMode::Sde).unwrap();
            println!("hidden {hidden:?} steps {steps} K {k}: sde reward {ret:.4}");
        }
    }
}

#[allow(dead_code)]
fn pilot_frozen_lambda() {
    let v_base = bandit_bc(7, 2000);
    let mut rng = ChaCha12Rng::seed_from_u64(0xDA7A);
    let data = generate_behavior_dataset(EnvKind::Bandit, BehaviorKind::MixtureScripted, 20_000, &mut rng)
        .unwrap()
        .into_with_capacity(60_000);
    let opts = TrainerOptions {
        variant: Variant::Trqam,
        lambda_frozen: true,
        seed: 11,
        critic_hidden: vec![64, 64],
        ..TrainerOptions::default()
    };
    let mut state = TrainerState::new(v_base, 1, 1, data, &opts).unwrap();
    let env = BimodalBandit::default();
    let mut sink = MetricsSink::memory();
    run_phase(&mut state, Phase::Offline, 1500, Some(&env), None,
        &EvalOptions { interval: 0, episodes: 1, mode: EvalMode::Sde }, &mut sink).unwrap();
    let hats: Vec<f64> = sink.lines().iter().filter(|l| l.contains("\"variant\""))
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kl_hat"].as_f64().unwrap_or(f64::NAN))
        .collect();
    for window in [(0, 100), (100, 300), (300, 600), (600, 1000), (1000, 1500)] {
        let slice = &hats[window.0..window.1];
        let m: f64 = slice.iter().sum::<f64>() / slice.len() as f64;
        println!("steps {:?}: mean kl_hat {m:.4}", window);
    }
}
