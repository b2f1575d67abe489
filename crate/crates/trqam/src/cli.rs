//! Command implementations behind the `trqam` binary: dataset generation,
//! behavior-cloning pretraining, offline-to-online training, evaluation, and
//! the oracle verification suite. Each command is deterministic given
//! `(config, seed)` and works through files in an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::envs::{
    export_dataset_csv, generate_behavior_dataset, load_dataset, save_dataset, BimodalBandit,
    Environment, EnvKind, PointMass2d,
};
use crate::error::Result;
#[cfg(test)]
use crate::error::Error;
use crate::flow::pretrain_bc;
use crate::metrics::MetricsSink;
use crate::numerics::io::{load_params, save_params};
use crate::oracles::{run_verification, VerifyReport};
use crate::trainer::{evaluate_policy, run_phase, Phase, TrainerState};

/// Instantiate the configured environment.
pub fn build_env(kind: EnvKind) -> Box<dyn Environment> {
    match kind {
        EnvKind::Bandit => Box::new(BimodalBandit::default()),
        EnvKind::PointMass => Box::new(PointMass2d::default()),
    }
}

/// State/action dimensions of the configured environment.
pub fn env_dims(kind: EnvKind) -> (usize, usize) {
    let env = build_env(kind);
    (env.spec().state_dim, env.spec().action_dim)
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Generate the behavior dataset and write the binary file plus a CSV
/// mirror. Returns the dataset path.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    ensure_out_dir(out)?;
    let kind = cfg.env_kind()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xDA7A_5E77);
    let buffer = generate_behavior_dataset(kind, cfg.behavior()?, cfg.data.size, &mut rng)?;
    let path = out.join(&cfg.io.dataset);
    save_dataset(&buffer, &path)?;
    export_dataset_csv(&buffer, &path.with_extension("csv"))?;
    log::info!(
        "wrote {} transitions to {}",
        buffer.len(),
        path.display()
    );
    Ok(path)
}

/// Pretrain the base velocity field by behavior cloning on the dataset.
/// Returns the checkpoint path.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    ensure_out_dir(out)?;
    let dataset_path = out.join(&cfg.io.dataset);
    let buffer = load_dataset(&dataset_path)?;
    let (state_dim, action_dim) = env_dims(cfg.env_kind()?);
    let bc = cfg.bc_config(state_dim, action_dim)?;
    let mut sink = MetricsSink::to_file(&out.join("bc_metrics.jsonl"))?;
    let v_base = pretrain_bc(&buffer, &bc, &mut sink)?;
    sink.flush()?;
    let path = out.join(&cfg.io.base_checkpoint);
    save_params(&v_base, &path)?;
    log::info!("wrote base checkpoint to {}", path.display());
    Ok(path)
}

/// Checkpoint manifest written next to the parameter files.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub variant: String,
    pub env: String,
    pub seed: u64,
    pub activation: String,
    pub base_checkpoint: String,
    pub ft_checkpoint: String,
    pub critic_online: Vec<String>,
    pub critic_target: Vec<String>,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub diverged_steps: u64,
}

/// Outcome of a training run.
#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub ft_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub diverged_steps: u64,
    pub final_eval: Option<(f64, f64)>,
}

/// Offline phase on the dataset, then online fine-tuning against the
/// environment; writes the fine-tuned checkpoint, critic members, manifest,
/// and step metrics.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    ensure_out_dir(out)?;
    let kind = cfg.env_kind()?;
    let (state_dim, action_dim) = env_dims(kind);
    let dataset_path = out.join(&cfg.io.dataset);
    let buffer =
        load_dataset(&dataset_path)?.into_with_capacity(cfg.train.buffer_capacity);
    let base_path = out.join(&cfg.io.base_checkpoint);
    let v_base = load_params(&base_path, cfg.activation()?)?;

    let opts = cfg.trainer_options()?;
    let mut state = TrainerState::new(v_base, state_dim, action_dim, buffer, &opts)?;
    let env = build_env(kind);
    let eval = cfg.eval_options()?;
    let metrics_path = out.join(&cfg.io.metrics);
    let mut sink = MetricsSink::to_file(&metrics_path)?;

    let offline =
        run_phase(
            &mut state,
            Phase::Offline,
            cfg.train.offline_steps,
            Some(env.as_ref()),
            None,
            &eval,
            &mut sink,
        )?;
    let online = run_phase(
        &mut state,
        Phase::Online,
        cfg.train.online_steps,
        Some(env.as_ref()),
        None,
        &eval,
        &mut sink,
    )?;
    sink.flush()?;

    let ft_path = out.join(&cfg.io.ft_checkpoint);
    save_params(&state.v_ft, &ft_path)?;
    let mut critic_online = Vec::new();
    let mut critic_target = Vec::new();
    for (i, member) in state.critic.online_members().iter().enumerate() {
        let p = out.join(format!("critic_online_{i}.trqp"));
        save_params(member, &p)?;
        critic_online.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    for (i, member) in state.critic.target_members().iter().enumerate() {
        let p = out.join(format!("critic_target_{i}.trqp"));
        save_params(member, &p)?;
        critic_target.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = Manifest {
        format_version: 1,
        variant: cfg.variant.clone(),
        env: cfg.env.clone(),
        seed: cfg.seed,
        activation: cfg.net.activation.clone(),
        base_checkpoint: cfg.io.base_checkpoint.clone(),
        ft_checkpoint: cfg.io.ft_checkpoint.clone(),
        critic_online,
        critic_target,
        offline_steps: cfg.train.offline_steps,
        online_steps: cfg.train.online_steps,
        diverged_steps: offline.diverged_steps + online.diverged_steps,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote fine-tuned checkpoint to {}", ft_path.display());
    Ok(TrainOutcome {
        ft_checkpoint: ft_path,
        metrics: metrics_path,
        manifest: manifest_path,
        diverged_steps: offline.diverged_steps + online.diverged_steps,
        final_eval: online.final_eval.or(offline.final_eval),
    })
}

/// Evaluation report for a checkpoint.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Roll the stochastic policy from a checkpoint; deterministic given seed.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    ensure_out_dir(out)?;
    let kind = cfg.env_kind()?;
    let (state_dim, action_dim) = env_dims(kind);
    let params = load_params(checkpoint, cfg.activation()?)?;
    let env = build_env(kind);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xE7A1_0000);
    let (mean_return, success_rate) = evaluate_policy(
        &params,
        state_dim,
        action_dim,
        env.as_ref(),
        &cfg.flow_schedule()?,
        cfg.train.eval_episodes,
        &mut rng,
        cfg.eval_mode()?,
    )?;
    let report = EvalReport {
        mean_return,
        success_rate,
        episodes: cfg.train.eval_episodes,
    };
    fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Run the oracle suite and write the report; the caller decides the exit
/// code from `report.pass`.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    ensure_out_dir(out)?;
    let report = run_verification(cfg.seed)?;
    fs::write(
        out.join("verify.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(extra: &str) -> RunConfig {
        let text = format!(
            "env = \"bandit\"\nseed = 3\n\
             [net]\nhidden = [16, 16]\n\
             [critic]\nhidden = [16, 16]\n\
             [data]\nsize = 400\n\
             [train]\nbatch_size = 8\nbc_steps = 30\noffline_steps = 12\nonline_steps = 6\n\
             eval_interval = 10\neval_episodes = 4\n{extra}"
        );
        RunConfig::parse(&text).unwrap()
    }

    #[test]
    fn full_pipeline_runs_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = small_cfg("");
        cmd_gen_data(&cfg, out).unwrap();
        cmd_pretrain(&cfg, out).unwrap();
        let outcome = cmd_train(&cfg, out).unwrap();
        assert!(outcome.ft_checkpoint.exists());
        assert!(outcome.manifest.exists());
        let metrics1 = fs::read_to_string(&outcome.metrics).unwrap();
        let step_lines = metrics1.lines().filter(|l| l.contains("\"variant\"")).count();
        let eval_lines = metrics1.lines().filter(|l| l.contains("\"episodes\"")).count();
        assert_eq!(step_lines, 12 + 6);
        assert_eq!(eval_lines, 1); // eval_interval 10 fires once at step 10

        // Re-run training: identical metrics bytes.
        let outcome2 = cmd_train(&cfg, out).unwrap();
        let metrics2 = fs::read_to_string(&outcome2.metrics).unwrap();
        assert_eq!(metrics1, metrics2);

        let report = cmd_eval(&cfg, &outcome.ft_checkpoint, out).unwrap();
        assert!(report.mean_return.is_finite());
        assert_eq!(report.episodes, 4);
    }

    #[test]
    fn train_with_zero_steps_keeps_the_pretrained_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = small_cfg("");
        cmd_gen_data(&cfg, out).unwrap();
        let base = cmd_pretrain(&cfg, out).unwrap();
        let mut cfg0 = cfg.clone();
        cfg0.train.offline_steps = 0;
        cfg0.train.online_steps = 0;
        let outcome = cmd_train(&cfg0, out).unwrap();
        let a = fs::read(&base).unwrap();
        let b = fs::read(&outcome.ft_checkpoint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_without_dataset_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg("");
        assert!(cmd_pretrain(&cfg, dir.path()).is_err());
    }

    #[test]
    fn eval_rejects_corrupt_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.trqp");
        fs::write(&bad, b"not a checkpoint").unwrap();
        let cfg = small_cfg("");
        assert!(matches!(
            cmd_eval(&cfg, &bad, dir.path()),
            Err(Error::CorruptFile { .. })
        ));
    }
}
