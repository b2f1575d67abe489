//! Training orchestration: the trust-region loop, the fixed-temperature
//! baseline, the loss-level KL baseline, offline and online phases, and
//! policy evaluation.
//!
//! Per-iteration order is fixed: critic TD update, policy update on fresh
//! trajectories, trust-region update (KL estimate on the same trajectories,
//! EMA, dual step), target polyak update, metrics.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adjoint::{
    adjoint_matching_batch_grad, compute_adjoint_path, external_objective_batch_grad,
};
use crate::critic::{CriticEnsemble, CriticFn, Which};
use crate::envs::{Environment, ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::flow::{
    sample_memoryless_sde, sample_ode, DenoisingTrajectory, FlowSchedule, MlpVelocity,
};
use crate::metrics::{EvalRecord, MetricsSink, StepRecord};
use crate::numerics::{clip_global_norm, global_norm, Activation, OptimizerState, ParamVector};
use crate::trust_region::{path_kl_estimate, TrustRegionState};

/// Which objective drives the policy update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Adaptive trust region internalized in the loss weighting.
    Trqam,
    /// Fixed temperature: lambda pinned to 1, terminal adjoint scaled by beta.
    QamFixed,
    /// Loss-level KL penalty with the dual-updated weight.
    ExternalKl,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Trqam => "trqam",
            Variant::QamFixed => "qam_fixed",
            Variant::ExternalKl => "external_kl",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "trqam" => Ok(Variant::Trqam),
            "qam_fixed" => Ok(Variant::QamFixed),
            "external_kl" => Ok(Variant::ExternalKl),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected 'trqam', 'qam_fixed', or 'external_kl')"
            ))),
        }
    }
}

/// Offline batches only, or interleaved environment steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

/// KL budget, optionally relaxed at the online transition.
#[derive(Debug, Clone, Copy)]
pub struct EpsKlSchedule {
    pub offline: f64,
    pub online: Option<f64>,
}

impl EpsKlSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            offline: eps,
            online: None,
        }
    }

    pub fn budget(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Offline => self.offline,
            Phase::Online => self.online.unwrap_or(self.offline),
        }
    }
}

/// Knobs for building a [`TrainerState`].
#[derive(Debug, Clone)]
pub struct TrainerOptions {
    pub variant: Variant,
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: FlowSchedule,
    pub eps_kl: EpsKlSchedule,
    pub eta_lambda: f64,
    pub rho_ema: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_frozen: bool,
    pub beta: f64,
    pub ensemble_size: usize,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub pessimism: f64,
    pub polyak_rate: f64,
    pub discount: f64,
    pub learning_rate: f64,
    pub clip_max_norm: f64,
    pub halt_on_divergence: bool,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            variant: Variant::Trqam,
            seed: 0,
            batch_size: 64,
            schedule: FlowSchedule::new(10).unwrap(),
            eps_kl: EpsKlSchedule::constant(0.5),
            eta_lambda: 0.1,
            rho_ema: 0.01,
            lambda_init: 1.0,
            lambda_min: crate::trust_region::LAMBDA_MIN_DEFAULT,
            lambda_frozen: false,
            beta: 1.0,
            ensemble_size: 2,
            critic_hidden: vec![64, 64],
            activation: Activation::Gelu,
            pessimism: 0.5,
            polyak_rate: 5e-3,
            discount: 0.99,
            learning_rate: 3e-4,
            clip_max_norm: 1.0,
            halt_on_divergence: true,
        }
    }
}

/// Everything the loop owns.
pub struct TrainerState {
    pub v_base: ParamVector,
    pub v_ft: ParamVector,
    pub critic: CriticEnsemble,
    pub policy_opt: OptimizerState,
    pub critic_opts: Vec<OptimizerState>,
    pub trust: TrustRegionState,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha12Rng,
    pub step: u64,
    pub phase: Phase,
    pub variant: Variant,
    pub schedule: FlowSchedule,
    pub state_dim: usize,
    pub action_dim: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub clip_max_norm: f64,
    pub lambda_frozen: bool,
    pub halt_on_divergence: bool,
    pub eps_schedule: EpsKlSchedule,
    pub diverged_steps: u64,
    eval_seed: u64,
}

impl TrainerState {
    pub fn new(
        v_base: ParamVector,
        state_dim: usize,
        action_dim: usize,
        buffer: ReplayBuffer,
        opts: &TrainerOptions,
    ) -> Result<Self> {
        if v_base.input_dim() != state_dim + action_dim + 1 {
            return Err(Error::Shape(format!(
                "base velocity net input dim {} does not match state {} + action {} + tau",
                v_base.input_dim(),
                state_dim,
                action_dim
            )));
        }
        let lambda_min = match opts.variant {
            // The floor protects the sigma_n weighting; the loss-level
            // penalty variant never divides by lambda, so its projection is
            // the plain non-negativity constraint.
            Variant::ExternalKl => 0.0,
            _ => opts.lambda_min,
        };
        let trust = TrustRegionState::new(
            opts.lambda_init,
            opts.eps_kl.budget(Phase::Offline),
            opts.eta_lambda,
            opts.rho_ema,
            lambda_min,
        )?;
        let critic = CriticEnsemble::new(
            opts.ensemble_size,
            state_dim,
            action_dim,
            &opts.critic_hidden,
            opts.activation,
            opts.pessimism,
            opts.polyak_rate,
            opts.discount,
            opts.seed ^ 0xC417_1C00,
        )?;
        let critic_opts = (0..opts.ensemble_size)
            .map(|_| OptimizerState::new(critic.online_members()[0].len(), opts.learning_rate))
            .collect();
        Ok(Self {
            v_ft: v_base.clone(),
            policy_opt: OptimizerState::new(v_base.len(), opts.learning_rate),
            v_base,
            critic,
            critic_opts,
            trust,
            buffer,
            rng: ChaCha12Rng::seed_from_u64(opts.seed ^ 0x7261_1480),
            step: 0,
            phase: Phase::Offline,
            variant: opts.variant,
            schedule: opts.schedule,
            state_dim,
            action_dim,
            batch_size: opts.batch_size,
            beta: opts.beta,
            clip_max_norm: opts.clip_max_norm,
            lambda_frozen: opts.lambda_frozen,
            halt_on_divergence: opts.halt_on_divergence,
            eps_schedule: opts.eps_kl,
            diverged_steps: 0,
            eval_seed: opts.seed ^ 0xE7A1_0000,
        })
    }

    /// Draw one action from the stochastic sampler conditioned on `state`.
    pub fn sample_action(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let v = MlpVelocity::new(&self.v_ft, self.state_dim, self.action_dim)?;
        let traj = sample_memoryless_sde(
            &v,
            state,
            &self.schedule,
            self.trust.lambda(),
            &mut self.rng,
        )?;
        Ok(traj.terminal().to_vec())
    }
}

/// One full iteration of the adaptive trust-region variant.
pub fn trqam_step(
    state: &mut TrainerState,
    batch: &[Transition],
    guidance: Option<&dyn CriticFn>,
) -> Result<StepRecord> {
    debug_assert_eq!(state.variant, Variant::Trqam);
    core_step(state, batch, guidance)
}

/// One iteration of the fixed-temperature baseline: lambda pinned to 1 in
/// both sampling metadata and loss weighting, terminal adjoint scaled by
/// `beta`, KL still measured for diagnostics, no dual update.
pub fn qam_fixed_step(
    state: &mut TrainerState,
    batch: &[Transition],
    beta: f64,
    guidance: Option<&dyn CriticFn>,
) -> Result<StepRecord> {
    debug_assert_eq!(state.variant, Variant::QamFixed);
    state.beta = beta;
    core_step(state, batch, guidance)
}

/// One iteration of the loss-level KL baseline: sampler and loss weights at
/// lambda = 1, plus the dual-updated penalty times the differentiable KL
/// surrogate.
pub fn external_kl_step(
    state: &mut TrainerState,
    batch: &[Transition],
    guidance: Option<&dyn CriticFn>,
) -> Result<StepRecord> {
    debug_assert_eq!(state.variant, Variant::ExternalKl);
    core_step(state, batch, guidance)
}

/// Dispatch on the configured variant.
pub fn train_step(
    state: &mut TrainerState,
    batch: &[Transition],
    guidance: Option<&dyn CriticFn>,
) -> Result<StepRecord> {
    core_step(state, batch, guidance)
}

fn core_step(
    state: &mut TrainerState,
    batch: &[Transition],
    guidance: Option<&dyn CriticFn>,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Domain(
            "training step needs a non-empty batch".into(),
        ));
    }
    let batch_refs: Vec<&Transition> = batch.iter().collect();
    let lambda_used = match state.variant {
        Variant::Trqam => state.trust.lambda(),
        Variant::QamFixed | Variant::ExternalKl => 1.0,
    };
    let beta = match state.variant {
        Variant::QamFixed => state.beta,
        _ => 1.0,
    };

    // Critic TD update. The backup action is drawn from the same stochastic
    // sampler the policy objective optimizes.
    let gamma = state.critic.discount;
    let targets = {
        let v_ft = MlpVelocity::new(&state.v_ft, state.state_dim, state.action_dim)?;
        let rng = &mut state.rng;
        let schedule = &state.schedule;
        state.critic.td_targets(
            &batch_refs,
            |next_state| {
                let traj = sample_memoryless_sde(&v_ft, next_state, schedule, lambda_used, rng)?;
                Ok(traj.terminal().to_vec())
            },
            gamma,
        )?
    };
    let critic_loss = state.critic.critic_update(
        &batch_refs,
        &targets,
        &mut state.critic_opts,
        state.clip_max_norm,
    )?;
    let mut mean_q = 0.0;
    for t in &batch_refs {
        mean_q += state
            .critic
            .ensemble_value(&t.state, &t.action, Which::Online)?;
    }
    mean_q /= batch_refs.len() as f64;

    // Policy update on freshly sampled trajectories.
    let critic_for_guidance: &dyn CriticFn = guidance.unwrap_or(&state.critic);
    let mut trajs: Vec<DenoisingTrajectory> = Vec::with_capacity(batch.len());
    let mut policy_failure: Option<Error> = None;
    {
        let v_ft = MlpVelocity::new(&state.v_ft, state.state_dim, state.action_dim)?;
        let rng = &mut state.rng;
        for t in &batch_refs {
            match sample_memoryless_sde(&v_ft, &t.state, &state.schedule, lambda_used, rng) {
                Ok(traj) => trajs.push(traj),
                Err(e @ Error::NumericalDivergence { .. }) => {
                    policy_failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    // Measure the path-KL surrogate with the parameters that generated the
    // trajectories, so a zero-deviation policy reports exactly zero.
    let mut kl_hat = None;
    if policy_failure.is_none() && trajs.len() == batch.len() {
        let v_ft = MlpVelocity::new(&state.v_ft, state.state_dim, state.action_dim)?;
        let v_base_field = MlpVelocity::new(&state.v_base, state.state_dim, state.action_dim)?;
        if let Ok(d_hat) = path_kl_estimate(&v_ft, &v_base_field, &trajs) {
            if d_hat.is_finite() {
                kl_hat = Some(d_hat);
            }
        }
    }

    let mut adj_loss = None;
    let mut grad_norm_pre_clip = 0.0;
    if policy_failure.is_none() {
        let v_base_field = MlpVelocity::new(&state.v_base, state.state_dim, state.action_dim)?;
        let mut adj_paths = Vec::with_capacity(trajs.len());
        for traj in &trajs {
            match compute_adjoint_path(critic_for_guidance, &v_base_field, traj, beta) {
                Ok(p) => adj_paths.push(p),
                Err(e @ Error::AdjointDivergence { .. }) => {
                    policy_failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if policy_failure.is_none() {
            let items: Vec<(&DenoisingTrajectory, &crate::adjoint::AdjointPath)> =
                trajs.iter().zip(adj_paths.iter()).collect();
            let grads_result = match state.variant {
                Variant::Trqam | Variant::QamFixed => adjoint_matching_batch_grad(
                    &state.v_ft,
                    state.state_dim,
                    &v_base_field,
                    &items,
                    lambda_used,
                ),
                Variant::ExternalKl => external_objective_batch_grad(
                    &state.v_ft,
                    state.state_dim,
                    &v_base_field,
                    &items,
                    state.trust.lambda(),
                )
                .map(|(l, _kl, g)| (l, g)),
            };
            match grads_result {
                Ok((loss_value, grads)) => {
                    grad_norm_pre_clip = global_norm(&grads);
                    match clip_global_norm(&grads, state.clip_max_norm) {
                        Ok(clipped) => {
                            state.policy_opt.step(&mut state.v_ft, &clipped)?;
                            adj_loss = Some(loss_value);
                        }
                        Err(e @ Error::NonFiniteGradient { .. }) => policy_failure = Some(e),
                        Err(e) => return Err(e),
                    }
                }
                Err(e @ Error::NumericalDivergence { .. }) => policy_failure = Some(e),
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(e) = policy_failure {
        state.diverged_steps += 1;
        if state.halt_on_divergence {
            return Err(e);
        }
    }

    // Trust-region update: smooth the measured surrogate, then the dual
    // step (unless the variant pins lambda).
    let lambda_report = state.trust.lambda();
    if let Some(d_hat) = kl_hat {
        state.trust.ema_update(d_hat)?;
    }
    let adapt = state.variant != Variant::QamFixed && !state.lambda_frozen;
    if adapt {
        state.trust.dual_update();
    }

    state.critic.polyak_update();

    let record = StepRecord {
        step: state.step,
        variant: state.variant.as_str(),
        lambda: lambda_report,
        kl_hat,
        kl_ema: state.trust.kl_ema(),
        eps_kl: state.trust.eps_kl,
        adj_loss,
        critic_loss,
        mean_q,
        grad_norm_pre_clip,
    };
    state.step += 1;
    Ok(record)
}

/// How to turn the velocity field into an action at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The stochastic sampler that defines the policy.
    Sde,
    /// Deterministic integration from a sampled Gaussian initial point.
    Ode,
}

/// Roll `episodes` episodes of an arbitrary policy; returns
/// `(mean return, success rate)`.
pub fn rollout_episodes(
    policy: &mut dyn FnMut(&[f64], &mut dyn RngCore) -> Result<Vec<f64>>,
    env: &dyn Environment,
    episodes: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Domain(
            "need at least one evaluation episode".into(),
        ));
    }
    let horizon = env.spec().horizon;
    let mut total_return = 0.0;
    let mut successes = 0usize;
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut ep_return = 0.0;
        let mut success = false;
        for _ in 0..horizon {
            let a = policy(&s, rng)?;
            let out = env.step(&s, &a);
            ep_return += out.reward;
            success |= out.success;
            if out.done {
                break;
            }
            s = out.next_state;
        }
        total_return += ep_return;
        if success {
            successes += 1;
        }
    }
    Ok((
        total_return / episodes as f64,
        successes as f64 / episodes as f64,
    ))
}

/// Evaluate a velocity-field policy on an environment.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    v_ft: &ParamVector,
    state_dim: usize,
    action_dim: usize,
    env: &dyn Environment,
    schedule: &FlowSchedule,
    episodes: usize,
    rng: &mut ChaCha12Rng,
    mode: EvalMode,
) -> Result<(f64, f64)> {
    let v = MlpVelocity::new(v_ft, state_dim, action_dim)?;
    let mut policy = |s: &[f64], rng: &mut dyn RngCore| -> Result<Vec<f64>> {
        match mode {
            EvalMode::Sde => {
                let traj = sample_memoryless_sde(&v, s, schedule, 1.0, rng)?;
                Ok(traj.terminal().to_vec())
            }
            EvalMode::Ode => {
                let x0: Vec<f64> = (0..action_dim)
                    .map(|_| StandardNormal.sample(&mut *rng))
                    .collect();
                sample_ode(&v, s, &x0, schedule)
            }
        }
    };
    rollout_episodes(&mut policy, env, episodes, rng)
}

/// Evaluation cadence inside [`run_phase`].
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub interval: usize,
    pub episodes: usize,
    pub mode: EvalMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            interval: 500,
            episodes: 50,
            mode: EvalMode::Sde,
        }
    }
}

/// Aggregate outcome of a phase run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_run: usize,
    pub diverged_steps: u64,
    pub final_eval: Option<(f64, f64)>,
    pub transitions_added: usize,
}

/// Run `steps` iterations of the configured phase. Offline iterates on
/// buffer batches; online interleaves one environment transition (acting
/// with the stochastic policy) with one gradient iteration. Evaluation
/// snapshots are emitted every `eval.interval` steps on an independent
/// deterministic stream.
pub fn run_phase(
    state: &mut TrainerState,
    phase: Phase,
    steps: usize,
    env: Option<&dyn Environment>,
    guidance: Option<&dyn CriticFn>,
    eval: &EvalOptions,
    sink: &mut MetricsSink,
) -> Result<RunSummary> {
    state.phase = phase;
    state.trust.eps_kl = state.eps_schedule.budget(phase);
    if phase == Phase::Online && env.is_none() {
        return Err(Error::Domain("online phase requires an environment".into()));
    }
    if state.buffer.is_empty() {
        return Err(Error::Domain("phase requires a populated buffer".into()));
    }
    let diverged_before = state.diverged_steps;
    let mut transitions_added = 0usize;
    let mut final_eval = None;

    // Online episode bookkeeping.
    let mut online_state: Option<Vec<f64>> = None;
    let mut online_step_in_episode = 0usize;

    for _ in 0..steps {
        if let (Phase::Online, Some(env)) = (phase, env) {
            let s = match online_state.take() {
                Some(s) => s,
                None => {
                    online_step_in_episode = 0;
                    env.reset(&mut state.rng)
                }
            };
            let a = state.sample_action(&s)?;
            let out = env.step(&s, &a);
            online_step_in_episode += 1;
            let truncated = online_step_in_episode >= env.spec().horizon;
            state.buffer.push(Transition {
                state: s,
                action: a,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            transitions_added += 1;
            online_state = if out.done || truncated {
                None
            } else {
                Some(out.next_state)
            };
        }

        let batch: Vec<Transition> = state
            .buffer
            .sample(state.batch_size, &mut state.rng)?
            .into_iter()
            .cloned()
            .collect();
        let record = core_step(state, &batch, guidance)?;
        sink.emit(&record)?;

        if let Some(env) = env {
            if eval.interval > 0 && state.step % eval.interval as u64 == 0 {
                let mut eval_rng = ChaCha12Rng::seed_from_u64(state.eval_seed ^ state.step);
                let (mean_return, success_rate) = evaluate_policy(
                    &state.v_ft,
                    state.state_dim,
                    state.action_dim,
                    env,
                    &state.schedule,
                    eval.episodes,
                    &mut eval_rng,
                    eval.mode,
                )?;
                sink.emit(&EvalRecord {
                    step: state.step,
                    mean_return,
                    success_rate,
                    episodes: eval.episodes,
                })?;
                final_eval = Some((mean_return, success_rate));
            }
        }
    }
    Ok(RunSummary {
        steps_run: steps,
        diverged_steps: state.diverged_steps - diverged_before,
        final_eval,
        transitions_added,
    })
}
