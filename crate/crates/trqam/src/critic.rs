//! TD critic ensemble with target networks and pessimistic guidance value.

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::graph::LossGraph;
use crate::numerics::{clip_global_norm, mlp_init, Activation, OptimizerState, ParamVector};

/// Anything that provides a guidance value and its action gradient. The
/// trained ensemble implements this; tests inject closed-form critics.
pub trait CriticFn {
    fn value(&self, state: &[f64], action: &[f64]) -> Result<f64>;
    /// `d value / d action` at fixed state.
    fn action_gradient(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>>;
}

/// Which half of the ensemble to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

/// Ensemble of Q networks with per-member targets, pessimistic aggregation
/// `mean - rho_pess * std` (population std), and polyak-averaged targets.
#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    online: Vec<ParamVector>,
    target: Vec<ParamVector>,
    pub pessimism: f64,
    pub polyak_rate: f64,
    pub discount: f64,
    state_dim: usize,
    action_dim: usize,
}

impl CriticEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ensemble_size: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        pessimism: f64,
        polyak_rate: f64,
        discount: f64,
        seed: u64,
    ) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(Error::InvalidArchitecture(
                "ensemble size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Domain(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        if !(polyak_rate > 0.0 && polyak_rate <= 1.0) {
            return Err(Error::Domain(format!(
                "polyak rate must lie in (0, 1], got {polyak_rate}"
            )));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut online = Vec::with_capacity(ensemble_size);
        for i in 0..ensemble_size {
            online.push(mlp_init(&sizes, activation, seed.wrapping_add(i as u64))?);
        }
        let target = online.clone();
        Ok(Self {
            online,
            target,
            pessimism,
            polyak_rate,
            discount,
            state_dim,
            action_dim,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.online.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn online_members(&self) -> &[ParamVector] {
        &self.online
    }

    pub fn target_members(&self) -> &[ParamVector] {
        &self.target
    }

    fn input(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "critic expects state dim {} and action dim {}, got {} and {}",
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        let mut input = Vec::with_capacity(state.len() + action.len());
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        Ok(input)
    }

    fn member_values(&self, which: Which, input: &[f64]) -> Result<Vec<f64>> {
        let members = match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        };
        members.iter().map(|m| Ok(m.forward(input)?[0])).collect()
    }

    /// Pessimistic aggregate `mean_i Q_i - rho_pess * std_i Q_i` over the
    /// selected ensemble (population std).
    pub fn ensemble_value(&self, state: &[f64], action: &[f64], which: Which) -> Result<f64> {
        let input = self.input(state, action)?;
        let q = self.member_values(which, &input)?;
        let n = q.len() as f64;
        let mean = q.iter().sum::<f64>() / n;
        let var = q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(mean - self.pessimism * var.sqrt())
    }

    /// TD regression targets `r + (1 - done) * gamma * Q_target(s', a')`
    /// with one action per transition drawn from `policy_sampler`.
    pub fn td_targets(
        &self,
        batch: &[&Transition],
        mut policy_sampler: impl FnMut(&[f64]) -> Result<Vec<f64>>,
        gamma: f64,
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Domain("TD targets over empty batch".into()));
        }
        batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.reward);
                }
                let a = policy_sampler(&t.next_state)?;
                Ok(t.reward + gamma * self.ensemble_value(&t.next_state, &a, Which::Target)?)
            })
            .collect()
    }

    /// One clipped Adam step per ensemble member on the mean squared error
    /// to the shared targets. Returns the mean member loss.
    pub fn critic_update(
        &mut self,
        batch: &[&Transition],
        targets: &[f64],
        optimizers: &mut [OptimizerState],
        clip_max_norm: f64,
    ) -> Result<f64> {
        if targets.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} transitions",
                targets.len(),
                batch.len()
            )));
        }
        if optimizers.len() != self.online.len() {
            return Err(Error::Shape(format!(
                "{} optimizers for {} ensemble members",
                optimizers.len(),
                self.online.len()
            )));
        }
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| self.input(&t.state, &t.action))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (member, opt) in self.online.iter_mut().zip(optimizers.iter_mut()) {
            let mut g = LossGraph::new(member);
            let mut terms = Vec::with_capacity(inputs.len());
            for (input, &y) in inputs.iter().zip(targets) {
                let xin = g.constant(input.clone());
                let q = g.network(xin)?;
                let t = g.constant(vec![y]);
                let d = g.sub(q, t)?;
                terms.push(g.squared_norm(d));
            }
            let loss = g.mean(&terms)?;
            let value = g.scalar_value(loss)?;
            let grads = g.grad_params(loss)?;
            drop(g);
            let clipped = clip_global_norm(&grads, clip_max_norm)?;
            opt.step(member, &clipped)?;
            total += value;
        }
        Ok(total / self.online.len() as f64)
    }

    /// `target <- (1 - rate) * target + rate * online`, elementwise.
    pub fn polyak_update(&mut self) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            for (tv, ov) in t.values_mut().iter_mut().zip(o.values()) {
                *tv = (1.0 - self.polyak_rate) * *tv + self.polyak_rate * ov;
            }
        }
    }
}

impl CriticFn for CriticEnsemble {
    fn value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.ensemble_value(state, action, Which::Online)
    }

    /// Gradient of the pessimistic aggregate through both the mean and the
    /// std: `mean_i grad Q_i - rho_pess * sum_i (Q_i - mean) grad Q_i / (K std)`.
    /// The std term is dropped at std = 0 (subgradient choice).
    fn action_gradient(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let input = self.input(state, action)?;
        let q = self.member_values(Which::Online, &input)?;
        let n = q.len() as f64;
        let mean = q.iter().sum::<f64>() / n;
        let var = q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let mut grad = vec![0.0; self.action_dim];
        for (member, &qi) in self.online.iter().zip(&q) {
            let gi = member.vjp_input(&input, &[1.0])?;
            let gi_action = &gi[self.state_dim..];
            let mut w = 1.0 / n;
            if std > 1e-12 {
                w -= self.pessimism * (qi - mean) / (n * std);
            }
            for (g, &v) in grad.iter_mut().zip(gi_action) {
                *g += w * v;
            }
        }
        Ok(grad)
    }
}
