//! The trust-region controller: closed-form path-KL estimator, EMA
//! smoothing, and projected dual descent on the diffusion-scaling parameter.

use crate::error::{Error, Result};
use crate::flow::{schedule_g, DenoisingTrajectory, VelocityField};

/// Default floor for the dual variable. A floor is required because the
/// adjoint-matching weights use `sigma_n = g / sqrt(lambda)`, which is
/// undefined at zero.
pub const LAMBDA_MIN_DEFAULT: f64 = 1e-3;

/// Dual controller state: the trust-region parameter, the smoothed KL
/// estimate, and the update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionState {
    lambda: f64,
    kl_ema: f64,
    pub eps_kl: f64,
    pub eta_lambda: f64,
    pub rho_ema: f64,
    lambda_min: f64,
}

impl TrustRegionState {
    pub fn new(
        lambda_init: f64,
        eps_kl: f64,
        eta_lambda: f64,
        rho_ema: f64,
        lambda_min: f64,
    ) -> Result<Self> {
        if !(lambda_min >= 0.0) {
            return Err(Error::TrustRegion(format!(
                "lambda_min must be non-negative, got {lambda_min}"
            )));
        }
        if lambda_init < lambda_min {
            return Err(Error::TrustRegion(format!(
                "lambda_init {lambda_init} below lambda_min {lambda_min}"
            )));
        }
        if !(eps_kl > 0.0) {
            return Err(Error::TrustRegion(format!(
                "eps_kl must be positive, got {eps_kl}"
            )));
        }
        if !(eta_lambda > 0.0) {
            return Err(Error::TrustRegion(format!(
                "eta_lambda must be positive, got {eta_lambda}"
            )));
        }
        if !(rho_ema > 0.0 && rho_ema <= 1.0) {
            return Err(Error::TrustRegion(format!(
                "rho_ema must lie in (0, 1], got {rho_ema}"
            )));
        }
        Ok(Self {
            lambda: lambda_init,
            kl_ema: 0.0,
            eps_kl,
            eta_lambda,
            rho_ema,
            lambda_min,
        })
    }

    /// Controller with the library defaults: `lambda_0 = 1` (the
    /// fixed-temperature special case, so training starts as vanilla adjoint
    /// matching), `rho_ema = 0.01`, `eta_lambda = 0.1`.
    pub fn with_budget(eps_kl: f64) -> Result<Self> {
        Self::new(1.0, eps_kl, 0.1, 0.01, LAMBDA_MIN_DEFAULT)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kl_ema(&self) -> f64 {
        self.kl_ema
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// `kl_ema <- (1 - rho) kl_ema + rho * kl_hat`.
    pub fn ema_update(&mut self, kl_hat: f64) -> Result<()> {
        if !(kl_hat >= 0.0) {
            return Err(Error::Domain(format!(
                "KL estimate must be non-negative, got {kl_hat}"
            )));
        }
        self.kl_ema = (1.0 - self.rho_ema) * self.kl_ema + self.rho_ema * kl_hat;
        Ok(())
    }

    /// Projected dual descent:
    /// `lambda <- max(lambda_min, lambda + eta * (kl_ema - eps_kl))`.
    pub fn dual_update(&mut self) {
        self.lambda =
            (self.lambda + self.eta_lambda * (self.kl_ema - self.eps_kl)).max(self.lambda_min);
    }

    /// Effective loss weighting `sigma_n(tau) = g(tau) / sqrt(lambda)`.
    pub fn effective_sigma(&self, tau: f64) -> Result<f64> {
        effective_sigma(self.lambda, tau)
    }
}

/// `sigma_n(tau) = g(tau) / sqrt(lambda)` for a given trust-region value.
pub fn effective_sigma(lambda: f64, tau: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::TrustRegion(format!(
            "lambda must be positive for sigma_n, got {lambda}"
        )));
    }
    Ok(schedule_g(tau)? / lambda.sqrt())
}

/// Monte-Carlo path-KL surrogate over a batch of recorded trajectories:
/// mean over trajectories of `sum_k (2h / g(tau~_k)^2) ||v_ft - v_base||^2`.
/// This is a measurement; nothing here is differentiated.
pub fn path_kl_estimate(
    v_ft: &dyn VelocityField,
    v_base: &dyn VelocityField,
    trajs: &[DenoisingTrajectory],
) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Domain("path KL estimate over empty batch".into()));
    }
    let mut total = 0.0;
    for traj in trajs {
        total += path_kl_single(v_ft, v_base, traj)?;
    }
    Ok(total / trajs.len() as f64)
}

/// Per-trajectory contribution to the path-KL surrogate.
pub fn path_kl_single(
    v_ft: &dyn VelocityField,
    v_base: &dyn VelocityField,
    traj: &DenoisingTrajectory,
) -> Result<f64> {
    let schedule = &traj.schedule;
    let h = schedule.step_size();
    let mut total = 0.0;
    for k in 0..schedule.num_steps() {
        let tau = schedule.tau_clamped(k);
        let g = schedule_g(tau)?;
        let x = &traj.points[k];
        let vf = v_ft.eval(&traj.state, x, tau)?;
        let vb = v_base.eval(&traj.state, x, tau)?;
        let dsq: f64 = vf.iter().zip(&vb).map(|(a, b)| (a - b) * (a - b)).sum();
        total += 2.0 * h / (g * g) * dsq;
    }
    Ok(total)
}
