//! Run configuration: a flat TOML document with dotted keys, one nesting
//! level, validated defaults for every omitted key.

use serde::Deserialize;

use crate::envs::{BehaviorKind, EnvKind};
use crate::error::{Error, Result};
use crate::flow::{BcConfig, FlowSchedule};
use crate::numerics::Activation;
use crate::trainer::{EpsKlSchedule, EvalMode, EvalOptions, TrainerOptions, Variant};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: String,
    pub env: String,
    pub seed: u64,
    pub net: NetConfig,
    pub flow: FlowConfig,
    pub trust: TrustConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub num_steps: usize,
    /// Defaults to half a grid cell when omitted.
    pub tau_clamp: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustConfig {
    /// A number, or a two-phase schedule `"0.5 -> 3.0 at online"`.
    pub eps_kl: EpsKlValue,
    pub eta_lambda: f64,
    pub rho_ema: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_frozen: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EpsKlValue {
    Number(f64),
    Schedule(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub pessimism: f64,
    pub polyak_rate: f64,
    pub discount: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub bc_steps: usize,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub learning_rate: f64,
    pub clip_max_norm: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_mode: String,
    pub beta: f64,
    pub halt_on_divergence: bool,
    pub buffer_capacity: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub size: usize,
    pub behavior: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub dataset: String,
    pub base_checkpoint: String,
    pub ft_checkpoint: String,
    pub metrics: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: "trqam".into(),
            env: "bandit".into(),
            seed: 0,
            net: NetConfig::default(),
            flow: FlowConfig::default(),
            trust: TrustConfig::default(),
            critic: CriticConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: "gelu".into(),
        }
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            tau_clamp: None,
        }
    }
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            eps_kl: EpsKlValue::Number(0.5),
            eta_lambda: 0.1,
            rho_ema: 0.01,
            lambda_init: 1.0,
            lambda_min: crate::trust_region::LAMBDA_MIN_DEFAULT,
            lambda_frozen: false,
        }
    }
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 2,
            hidden: vec![64, 64],
            pessimism: 0.5,
            polyak_rate: 5e-3,
            discount: 0.99,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            bc_steps: 2000,
            offline_steps: 2000,
            online_steps: 2000,
            learning_rate: 3e-4,
            clip_max_norm: 1.0,
            eval_interval: 500,
            eval_episodes: 50,
            eval_mode: "sde".into(),
            beta: 1.0,
            halt_on_divergence: true,
            buffer_capacity: 100_000,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 20_000,
            behavior: "mixture-of-scripted".into(),
        }
    }
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset.trqd".into(),
            base_checkpoint: "v_base.trqp".into(),
            ft_checkpoint: "v_ft.trqp".into(),
            metrics: "metrics.jsonl".into(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(v)
}

fn positive_int(name: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(v)
}

impl RunConfig {
    /// Parse and validate a TOML document. Omitted keys fall back to
    /// documented defaults; unknown keys are rejected by name.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        self.env_kind()?;
        self.activation()?;
        self.behavior()?;
        self.eps_schedule()?;
        self.eval_mode()?;
        self.flow_schedule()?;
        positive("trust.eta_lambda", self.trust.eta_lambda)?;
        if !(self.trust.rho_ema > 0.0 && self.trust.rho_ema <= 1.0) {
            return Err(Error::Config(format!(
                "trust.rho_ema must lie in (0, 1], got {}",
                self.trust.rho_ema
            )));
        }
        positive("trust.lambda_init", self.trust.lambda_init)?;
        if self.trust.lambda_min < 0.0 {
            return Err(Error::Config(
                "trust.lambda_min must be non-negative".into(),
            ));
        }
        if self.net.hidden.iter().any(|&n| n == 0) || self.critic.hidden.iter().any(|&n| n == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        positive_int("critic.ensemble_size", self.critic.ensemble_size)?;
        positive("critic.polyak_rate", self.critic.polyak_rate)?;
        if self.critic.pessimism < 0.0 {
            return Err(Error::Config(
                "critic.pessimism must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.critic.discount) {
            return Err(Error::Config(format!(
                "critic.discount must lie in [0, 1), got {}",
                self.critic.discount
            )));
        }
        positive_int("train.batch_size", self.train.batch_size)?;
        positive("train.learning_rate", self.train.learning_rate)?;
        positive("train.clip_max_norm", self.train.clip_max_norm)?;
        positive("train.beta", self.train.beta)?;
        positive_int("train.buffer_capacity", self.train.buffer_capacity)?;
        positive_int("train.eval_episodes", self.train.eval_episodes)?;
        positive_int("data.size", self.data.size)?;
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        EnvKind::parse(&self.env)
    }

    pub fn behavior(&self) -> Result<BehaviorKind> {
        BehaviorKind::parse(&self.data.behavior)
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.net.activation.as_str() {
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected 'gelu', 'tanh', or 'relu')"
            ))),
        }
    }

    pub fn eval_mode(&self) -> Result<EvalMode> {
        match self.train.eval_mode.as_str() {
            "sde" => Ok(EvalMode::Sde),
            "ode" => Ok(EvalMode::Ode),
            other => Err(Error::Config(format!(
                "unknown eval_mode '{other}' (expected 'sde' or 'ode')"
            ))),
        }
    }

    pub fn flow_schedule(&self) -> Result<FlowSchedule> {
        positive_int("flow.num_steps", self.flow.num_steps)?;
        match self.flow.tau_clamp {
            Some(c) => FlowSchedule::with_clamp(self.flow.num_steps, c)
                .map_err(|e| Error::Config(format!("flow.tau_clamp: {e}"))),
            None => FlowSchedule::new(self.flow.num_steps),
        }
    }

    /// The KL budget, either constant or switching at the online boundary.
    pub fn eps_schedule(&self) -> Result<EpsKlSchedule> {
        match &self.trust.eps_kl {
            EpsKlValue::Number(v) => {
                positive("trust.eps_kl", *v)?;
                Ok(EpsKlSchedule::constant(*v))
            }
            EpsKlValue::Schedule(text) => parse_eps_schedule(text),
        }
    }

    pub fn trainer_options(&self) -> Result<TrainerOptions> {
        Ok(TrainerOptions {
            variant: self.variant()?,
            seed: self.seed,
            batch_size: self.train.batch_size,
            schedule: self.flow_schedule()?,
            eps_kl: self.eps_schedule()?,
            eta_lambda: self.trust.eta_lambda,
            rho_ema: self.trust.rho_ema,
            lambda_init: self.trust.lambda_init,
            lambda_min: self.trust.lambda_min,
            lambda_frozen: self.trust.lambda_frozen,
            beta: self.train.beta,
            ensemble_size: self.critic.ensemble_size,
            critic_hidden: self.critic.hidden.clone(),
            activation: self.activation()?,
            pessimism: self.critic.pessimism,
            polyak_rate: self.critic.polyak_rate,
            discount: self.critic.discount,
            learning_rate: self.train.learning_rate,
            clip_max_norm: self.train.clip_max_norm,
            halt_on_divergence: self.train.halt_on_divergence,
        })
    }

    pub fn bc_config(&self, state_dim: usize, action_dim: usize) -> Result<BcConfig> {
        Ok(BcConfig {
            state_dim,
            action_dim,
            hidden: self.net.hidden.clone(),
            activation: self.activation()?,
            steps: self.train.bc_steps,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            clip_max_norm: self.train.clip_max_norm,
            seed: self.seed,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            interval: self.train.eval_interval,
            episodes: self.train.eval_episodes,
            mode: self.eval_mode()?,
        })
    }
}

/// Parse `"A -> B at online"` into a two-phase budget.
fn parse_eps_schedule(text: &str) -> Result<EpsKlSchedule> {
    let err = || {
        Error::Config(format!(
            "trust.eps_kl schedule must look like '0.5 -> 3.0 at online', got '{text}'"
        ))
    };
    let (lhs, rest) = text.split_once("->").ok_or_else(err)?;
    let (rhs, marker) = rest.split_once("at").ok_or_else(err)?;
    if marker.trim() != "online" {
        return Err(err());
    }
    let offline: f64 = lhs.trim().parse().map_err(|_| err())?;
    let online: f64 = rhs.trim().parse().map_err(|_| err())?;
    positive("trust.eps_kl (offline phase)", offline)?;
    positive("trust.eps_kl (online phase)", online)?;
    Ok(EpsKlSchedule {
        offline,
        online: Some(online),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.variant, "trqam");
        assert_eq!(cfg.env, "bandit");
        assert_eq!(cfg.flow.num_steps, 10);
        assert_eq!(cfg.train.batch_size, 64);
        let eps = cfg.eps_schedule().unwrap();
        assert_eq!(eps.offline, 0.5);
        assert!(eps.online.is_none());
    }

    #[test]
    fn negative_budget_is_rejected_with_constraint() {
        let err = RunConfig::parse("[trust]\neps_kl = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("must be positive"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("frobnicate = 3\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
        let err = RunConfig::parse("[trust]\nepskl = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("epskl"), "{err}");
    }

    #[test]
    fn two_phase_schedule_parses() {
        let cfg = RunConfig::parse("[trust]\neps_kl = \"0.5 -> 3.0 at online\"\n").unwrap();
        let eps = cfg.eps_schedule().unwrap();
        assert_eq!(eps.offline, 0.5);
        assert_eq!(eps.online, Some(3.0));

        assert!(RunConfig::parse("[trust]\neps_kl = \"0.5 to 3.0\"\n").is_err());
        assert!(RunConfig::parse("[trust]\neps_kl = \"0.5 -> 3.0 at offline\"\n").is_err());
    }

    #[test]
    fn dotted_keys_work() {
        let cfg = RunConfig::parse("trust.eps_kl = 2.0\ntrain.batch_size = 8\n").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.eps_schedule().unwrap().offline, 2.0);
    }

    #[test]
    fn trainer_options_round_trip() {
        let cfg = RunConfig::parse(
            "variant = \"qam_fixed\"\n[train]\nbeta = 5.0\n[critic]\nensemble_size = 3\n",
        )
        .unwrap();
        let opts = cfg.trainer_options().unwrap();
        assert_eq!(opts.variant, Variant::QamFixed);
        assert_eq!(opts.beta, 5.0);
        assert_eq!(opts.ensemble_size, 3);
    }

    #[test]
    fn bad_enum_values_name_expectations() {
        assert!(RunConfig::parse("variant = \"ppo\"\n").is_err());
        assert!(RunConfig::parse("env = \"atari\"\n").is_err());
        assert!(RunConfig::parse("[net]\nactivation = \"swish\"\n").is_err());
    }
}
