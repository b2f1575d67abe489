//! Terminal adjoint from the critic, the backward lean-adjoint recursion
//! through the frozen base drift, and the adjoint-matching loss.
//!
//! Index convention: `adjoints[k]` is the sensitivity of the terminal cost
//! to the trajectory point `X_{tau_k}`, so the backward recursion applies
//! the transposed step Jacobian at the left grid point of each cell, and the
//! loss pairs the velocity deviation at step `k` with `adjoints[k + 1]` (the
//! cotangent that multiplies step `k`'s drift injection in the chain rule).
//! This makes the loss gradient at `v_ft = v_base` exactly parallel to full
//! backpropagation through the sampling chain on the same noises.

use crate::critic::CriticFn;
use crate::error::{Error, Result};
use crate::flow::{DenoisingTrajectory, MlpVelocity, VelocityField};
use crate::numerics::graph::LossGraph;
use crate::numerics::ParamVector;
use crate::trust_region::{effective_sigma, LAMBDA_MIN_DEFAULT};

/// Backward adjoint states along one trajectory; `adjoints.len()` equals the
/// number of trajectory points.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub adjoints: Vec<Vec<f64>>,
    pub terminal_scale: f64,
}

impl AdjointPath {
    pub fn terminal(&self) -> &[f64] {
        self.adjoints.last().unwrap()
    }
}

/// `-beta * d Q(s, x1) / d x1`: the terminal condition of the backward
/// recursion.
pub fn terminal_adjoint(
    critic: &dyn CriticFn,
    state: &[f64],
    x1: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let g = critic.action_gradient(state, x1)?;
    Ok(g.into_iter().map(|v| -beta * v).collect())
}

/// Integrate the lean adjoint backward over the trajectory's grid using
/// vector-Jacobian products of the frozen base drift `2 v_base - x / tau~`.
/// All trajectory points are treated as constants.
pub fn solve_lean_adjoint(
    v_base: &dyn VelocityField,
    traj: &DenoisingTrajectory,
    adjoint_terminal: &[f64],
    terminal_scale: f64,
) -> Result<AdjointPath> {
    let schedule = &traj.schedule;
    let k_steps = schedule.num_steps();
    let h = schedule.step_size();
    let d = adjoint_terminal.len();
    if d != v_base.action_dim() {
        return Err(Error::Shape(format!(
            "terminal adjoint dim {} does not match action dim {}",
            d,
            v_base.action_dim()
        )));
    }
    let mut adjoints = vec![Vec::new(); k_steps + 1];
    adjoints[k_steps] = adjoint_terminal.to_vec();
    for k in (0..k_steps).rev() {
        let tau = schedule.tau_clamped(k);
        let x = &traj.points[k];
        let upstream = adjoints[k + 1].clone();
        let w = v_base.vjp_x(&traj.state, x, tau, &upstream)?;
        let mut next = Vec::with_capacity(d);
        for i in 0..d {
            next.push(upstream[i] + h * (2.0 * w[i] - upstream[i] / tau));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::AdjointDivergence { step: k });
        }
        adjoints[k] = next;
    }
    Ok(AdjointPath {
        adjoints,
        terminal_scale,
    })
}

/// Terminal adjoint plus backward solve in one call.
pub fn compute_adjoint_path(
    critic: &dyn CriticFn,
    v_base: &dyn VelocityField,
    traj: &DenoisingTrajectory,
    beta: f64,
) -> Result<AdjointPath> {
    let terminal = terminal_adjoint(critic, &traj.state, traj.terminal(), beta)?;
    solve_lean_adjoint(v_base, traj, &terminal, beta)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < LAMBDA_MIN_DEFAULT {
        return Err(Error::TrustRegion(format!(
            "lambda {lambda} below the loss floor {LAMBDA_MIN_DEFAULT}"
        )));
    }
    Ok(())
}

/// Adjoint-matching loss of one trajectory:
/// `sum_k || (2 / sigma_n(tau~_k)) (v_ft - v_base)(X_k) + sigma_n(tau~_k) a_{k+1} ||^2`
/// with `sigma_n(tau) = g(tau) / sqrt(lambda)`.
pub fn adjoint_matching_loss_value(
    v_ft: &dyn VelocityField,
    v_base: &dyn VelocityField,
    traj: &DenoisingTrajectory,
    adj: &AdjointPath,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let schedule = &traj.schedule;
    if adj.adjoints.len() != traj.points.len() {
        return Err(Error::Shape(format!(
            "adjoint path has {} entries for {} trajectory points",
            adj.adjoints.len(),
            traj.points.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..schedule.num_steps() {
        let tau = schedule.tau_clamped(k);
        let sigma = effective_sigma(lambda, tau)?;
        let x = &traj.points[k];
        let vf = v_ft.eval(&traj.state, x, tau)?;
        let vb = v_base.eval(&traj.state, x, tau)?;
        let a = &adj.adjoints[k + 1];
        total += vf
            .iter()
            .zip(&vb)
            .zip(a)
            .map(|((f, b), ai)| {
                let r = 2.0 / sigma * (f - b) + sigma * ai;
                r * r
            })
            .sum::<f64>();
    }
    Ok(total)
}

/// Mean adjoint-matching loss over a batch of trajectories and its exact
/// gradient in the fine-tuned parameters. Trajectory points and adjoints are
/// constants; only `v_ft` evaluations carry gradient.
pub fn adjoint_matching_batch_grad(
    params: &ParamVector,
    state_dim: usize,
    v_base: &dyn VelocityField,
    items: &[(&DenoisingTrajectory, &AdjointPath)],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lambda(lambda)?;
    if items.is_empty() {
        return Err(Error::Domain("adjoint matching over empty batch".into()));
    }
    let action_dim = v_base.action_dim();
    let v_ft = MlpVelocity::new(params, state_dim, action_dim)?;
    let mut g = LossGraph::new(params);
    let mut traj_nodes = Vec::with_capacity(items.len());
    for (traj, adj) in items {
        let schedule = &traj.schedule;
        let mut terms = Vec::with_capacity(schedule.num_steps());
        for k in 0..schedule.num_steps() {
            let tau = schedule.tau_clamped(k);
            let sigma = effective_sigma(lambda, tau)?;
            let x = &traj.points[k];
            let input = g.constant(v_ft.input(&traj.state, x, tau));
            let out = g.network(input)?;
            let base = g.constant(v_base.eval(&traj.state, x, tau)?);
            let dv = g.sub(out, base)?;
            let scaled = g.scale(dv, 2.0 / sigma);
            let shift = g.constant(adj.adjoints[k + 1].iter().map(|a| sigma * a).collect());
            let resid = g.add(scaled, shift)?;
            terms.push(g.squared_norm(resid));
        }
        traj_nodes.push(g.sum(&terms)?);
    }
    let loss = g.mean(&traj_nodes)?;
    Ok((g.scalar_value(loss)?, g.grad_params(loss)?))
}

/// Loss-level KL variant: adjoint matching at `lambda = 1` plus
/// `penalty_weight` times the differentiable path-KL surrogate, one tape.
/// Returns `(adjoint loss, KL surrogate, gradient)`.
pub fn external_objective_batch_grad(
    params: &ParamVector,
    state_dim: usize,
    v_base: &dyn VelocityField,
    items: &[(&DenoisingTrajectory, &AdjointPath)],
    penalty_weight: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Domain("adjoint matching over empty batch".into()));
    }
    if !(penalty_weight >= 0.0) {
        return Err(Error::Domain(format!(
            "penalty weight must be non-negative, got {penalty_weight}"
        )));
    }
    let action_dim = v_base.action_dim();
    let v_ft = MlpVelocity::new(params, state_dim, action_dim)?;
    let mut g = LossGraph::new(params);
    let mut adj_nodes = Vec::with_capacity(items.len());
    let mut kl_nodes = Vec::with_capacity(items.len());
    for (traj, adj) in items {
        let schedule = &traj.schedule;
        let h = schedule.step_size();
        let mut adj_terms = Vec::with_capacity(schedule.num_steps());
        let mut kl_terms = Vec::with_capacity(schedule.num_steps());
        for k in 0..schedule.num_steps() {
            let tau = schedule.tau_clamped(k);
            let sigma = effective_sigma(1.0, tau)?;
            let x = &traj.points[k];
            let input = g.constant(v_ft.input(&traj.state, x, tau));
            let out = g.network(input)?;
            let base = g.constant(v_base.eval(&traj.state, x, tau)?);
            let dv = g.sub(out, base)?;
            let scaled = g.scale(dv, 2.0 / sigma);
            let shift = g.constant(adj.adjoints[k + 1].iter().map(|a| sigma * a).collect());
            let resid = g.add(scaled, shift)?;
            adj_terms.push(g.squared_norm(resid));
            let dv_sq = g.squared_norm(dv);
            kl_terms.push((dv_sq, 2.0 * h / (sigma * sigma)));
        }
        adj_nodes.push(g.sum(&adj_terms)?);
        kl_nodes.push(g.weighted_sum(&kl_terms)?);
    }
    let adj_loss = g.mean(&adj_nodes)?;
    let kl_loss = g.mean(&kl_nodes)?;
    let total = g.weighted_sum(&[(adj_loss, 1.0), (kl_loss, penalty_weight)])?;
    Ok((
        g.scalar_value(adj_loss)?,
        g.scalar_value(kl_loss)?,
        g.grad_params(total)?,
    ))
}
