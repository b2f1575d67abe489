//! Minimal differentiable MLP substrate: flat parameter store, forward pass,
//! vector-Jacobian products, reverse-mode loss gradients, Adam, and global-norm
//! clipping. Everything is `f64` and deterministic given its inputs.
//!
//! Parameter layout is flat: for each layer, the weight matrix in row-major
//! order (`out_dim` rows of `in_dim`), followed by the bias vector. Hidden
//! layers apply the configured activation; the output layer is linear.

pub mod graph;
pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => x * gauss_cdf(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gauss_cdf(x) + x * gauss_pdf(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Flat parameter store for an MLP.
///
/// `values` holds, per layer, the row-major weight matrix followed by the
/// bias vector. The activation applies to hidden layers only and is runtime
/// metadata (the binary format stores architecture and values; see [`io`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layer_sizes: Vec<usize>,
    activation: Activation,
    values: Vec<f64>,
}

/// Number of parameters implied by a layer-size list.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least 2 layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArchitecture(
            "layer sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// Initialize an MLP with fan-in-scaled uniform weights and zero biases.
///
/// Weights are drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))` using a
/// ChaCha stream seeded with `seed`, so the result is bit-reproducible.
pub fn mlp_init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<ParamVector> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (1.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push((rng.random::<f64>() * 2.0 - 1.0) * bound);
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    Ok(ParamVector {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        values,
    })
}

impl ParamVector {
    /// Wrap explicit values; lengths and finiteness are checked.
    pub fn from_values(
        layer_sizes: &[usize],
        activation: Activation,
        values: Vec<f64>,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expect = param_count(layer_sizes);
        if values.len() != expect {
            return Err(Error::Shape(format!(
                "expected {expect} parameter values for {layer_sizes:?}, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite parameter value at flat index {i}"
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            values,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// (weight, bias) slices of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let mut off = 0;
        for k in 0..l {
            off += self.layer_sizes[k] * self.layer_sizes[k + 1] + self.layer_sizes[k + 1];
        }
        let (ni, no) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.values[off..off + ni * no];
        let b = &self.values[off + ni * no..off + ni * no + no];
        (w, b)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match first layer size {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass. Output length equals the last layer size.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output().to_vec())
    }

    /// Forward pass keeping pre-activations and activations for backward use.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let nl = self.num_layers();
        let mut pre = Vec::with_capacity(nl);
        let mut act = Vec::with_capacity(nl + 1);
        act.push(input.to_vec());
        for l in 0..nl {
            let (w, b) = self.layer(l);
            let (ni, no) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let x = &act[l];
            let mut z = vec![0.0; no];
            for o in 0..no {
                let row = &w[o * ni..(o + 1) * ni];
                let mut s = b[o];
                for i in 0..ni {
                    s += row[i] * x[i];
                }
                z[o] = s;
            }
            let y = if l + 1 == nl {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            act.push(y);
        }
        Ok(ForwardTrace { pre, act })
    }

    /// Vector-Jacobian product with respect to the input:
    /// `cotangent^T * d(output)/d(input)`.
    pub fn vjp_input(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![0.0; 0];
        self.backward_from_trace(&trace, cotangent, None, &mut grads)
    }

    /// Backward pass from a recorded trace. Accumulates parameter gradients
    /// into `param_grads` when `accumulate` is set, and returns the input
    /// cotangent either way.
    pub(crate) fn backward_from_trace(
        &self,
        trace: &ForwardTrace,
        cotangent: &[f64],
        accumulate: Option<f64>,
        param_grads: &mut Vec<f64>,
    ) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent length {} does not match output dimension {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let nl = self.num_layers();
        let scale = accumulate.unwrap_or(0.0);
        if accumulate.is_some() && param_grads.len() != self.len() {
            param_grads.resize(self.len(), 0.0);
        }
        let mut d = cotangent.to_vec();
        let mut off_end = self.len();
        for l in (0..nl).rev() {
            let (ni, no) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = off_end - (ni * no + no);
            // d currently holds dL/dy for this layer's output; fold the
            // activation derivative in for hidden layers.
            if l + 1 != nl {
                let z = &trace.pre[l];
                for o in 0..no {
                    d[o] *= self.activation.derivative(z[o]);
                }
            }
            let x = &trace.act[l];
            if accumulate.is_some() {
                for o in 0..no {
                    let g = d[o] * scale;
                    let wrow = off + o * ni;
                    for i in 0..ni {
                        param_grads[wrow + i] += g * x[i];
                    }
                    param_grads[off + ni * no + o] += g;
                }
            }
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; ni];
            for o in 0..no {
                let row = &w[o * ni..(o + 1) * ni];
                let g = d[o];
                for i in 0..ni {
                    dx[i] += g * row[i];
                }
            }
            d = dx;
            off_end = off;
        }
        Ok(d)
    }
}

/// Cached activations from [`ParamVector::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Activations per layer, starting with the input itself.
    act: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.act.last().unwrap()
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
///
/// Direction is preserved; non-finite entries are an error, not something to
/// clip away silently.
pub fn clip_global_norm(grads: &[f64], max_norm: f64) -> Result<Vec<f64>> {
    if !(max_norm > 0.0) {
        return Err(Error::Domain(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= max_norm {
        return Ok(grads.to_vec());
    }
    let s = max_norm / norm;
    Ok(grads.iter().map(|g| g * s).collect())
}

/// Global L2 norm of a gradient array.
pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut ParamVector, grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match {} parameters / {} moments",
                grads.len(),
                params.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..grads.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params.values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_directional(
        params: &ParamVector,
        input: &[f64],
        dir: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let plus: Vec<f64> = input.iter().zip(dir).map(|(x, d)| x + eps * d).collect();
        let minus: Vec<f64> = input.iter().zip(dir).map(|(x, d)| x - eps * d).collect();
        let fp = params.forward(&plus).unwrap();
        let fm = params.forward(&minus).unwrap();
        fp.iter().zip(fm).map(|(p, m)| (p - m) / (2.0 * eps)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = mlp_init(&[2, 4, 1], Activation::Gelu, 7).unwrap();
        let b = mlp_init(&[2, 4, 1], Activation::Gelu, 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c = mlp_init(&[2, 4, 1], Activation::Gelu, 8).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn init_biases_are_zero() {
        let p = mlp_init(&[3, 3], Activation::Tanh, 42).unwrap();
        // Layout: 9 weights then 3 biases.
        assert!(p.values()[9..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn param_count_matches_layout() {
        let sizes = [2usize, 512, 512, 512, 512, 5];
        let expect = 2 * 512 + 512 + 3 * (512 * 512 + 512) + 512 * 5 + 5;
        assert_eq!(param_count(&sizes), expect);
        let p = mlp_init(&sizes, Activation::Gelu, 0).unwrap();
        assert_eq!(p.len(), expect);
    }

    #[test]
    fn invalid_architectures_rejected() {
        assert!(matches!(
            mlp_init(&[3], Activation::Gelu, 0),
            Err(Error::InvalidArchitecture(_))
        ));
        assert!(matches!(
            mlp_init(&[3, 0, 1], Activation::Gelu, 0),
            Err(Error::InvalidArchitecture(_))
        ));
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let mut p = mlp_init(&[3, 2], Activation::Gelu, 0).unwrap();
        p.values_mut().fill(0.0);
        p.values_mut()[6] = 1.5;
        p.values_mut()[7] = -0.25;
        let y = p.forward(&[10.0, -3.0, 0.5]).unwrap();
        assert_eq!(y, vec![1.5, -0.25]);
    }

    #[test]
    fn forward_identity_layer() {
        let mut p = mlp_init(&[3, 3], Activation::Relu, 0).unwrap();
        p.values_mut().fill(0.0);
        for i in 0..3 {
            p.values_mut()[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 4.0];
        let y = p.forward(&x).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn forward_shape_error() {
        let p = mlp_init(&[3, 2], Activation::Gelu, 0).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn directional_derivative_matches_finite_differences() {
        for (seed, act) in [(1u64, Activation::Gelu), (2, Activation::Tanh)] {
            let p = mlp_init(&[3, 8, 8, 2], act, seed).unwrap();
            let input = [0.4, -0.7, 1.1];
            let dir = [0.3, 0.9, -0.5];
            let fd = fd_directional(&p, &input, &dir, 1e-5);
            // Forward directional derivative via one vjp per output coordinate.
            for o in 0..2 {
                let mut cot = vec![0.0; 2];
                cot[o] = 1.0;
                let g = p.vjp_input(&input, &cot).unwrap();
                let jvp: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
                let rel = (jvp - fd[o]).abs() / fd[o].abs().max(1e-8);
                assert!(rel <= 1e-4, "rel error {rel} for output {o} ({act:?})");
            }
        }
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let p = mlp_init(&[4, 6, 3], Activation::Gelu, 3).unwrap();
        let g = p.vjp_input(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_single_linear_layer_is_w_transpose() {
        let mut p = mlp_init(&[2, 3], Activation::Gelu, 0).unwrap();
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // rows (out=3, in=2)
        p.values_mut()[..6].copy_from_slice(&w);
        p.values_mut()[6..].fill(0.0);
        let cot = [1.0, -1.0, 2.0];
        let g = p.vjp_input(&[0.0, 0.0], &cot).unwrap();
        // W^T cot: col i = sum_o w[o][i] * cot[o]
        assert_eq!(g, vec![1.0 * 1.0 - 3.0 + 5.0 * 2.0, 2.0 - 4.0 + 6.0 * 2.0]);
    }

    #[test]
    fn vjp_matches_full_fd_jacobian_small_net() {
        let p = mlp_init(&[3, 5, 2], Activation::Tanh, 11).unwrap();
        let input = [0.25, -0.5, 0.75];
        let eps = 1e-5;
        // FD Jacobian, 2x3.
        let mut jac = [[0.0f64; 3]; 2];
        for i in 0..3 {
            let mut dir = [0.0; 3];
            dir[i] = 1.0;
            let col = fd_directional(&p, &input, &dir, eps);
            for o in 0..2 {
                jac[o][i] = col[o];
            }
        }
        let cot = [0.7, -1.3];
        let g = p.vjp_input(&input, &cot).unwrap();
        for i in 0..3 {
            let want = cot[0] * jac[0][i] + cot[1] * jac[1][i];
            let rel = (g[i] - want).abs() / want.abs().max(1e-8);
            assert!(rel <= 1e-4, "rel {rel} at input {i}");
        }
    }

    #[test]
    fn clip_examples() {
        let g = vec![0.3, 0.4]; // norm 0.5
        assert_eq!(clip_global_norm(&g, 1.0).unwrap(), g);
        let g = vec![1.2, 1.6]; // norm 2
        let c = clip_global_norm(&g, 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        let z = vec![0.0; 4];
        assert_eq!(clip_global_norm(&z, 1.0).unwrap(), z);
        assert!(matches!(
            clip_global_norm(&[1.0, f64::NAN], 1.0),
            Err(Error::NonFiniteGradient { index: 1 })
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = mlp_init(&[2, 2], Activation::Gelu, 5).unwrap();
        let before = p.values().to_vec();
        let mut opt = OptimizerState::new(p.len(), 3e-4);
        let zeros = vec![0.0; p.len()];
        opt.step(&mut p, &zeros).unwrap();
        assert_eq!(p.values(), &before[..]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_identity() {
        let mut p = mlp_init(&[2, 2], Activation::Gelu, 5).unwrap();
        let before = p.values().to_vec();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 - 2.5) * 0.1).collect();
        let lr = 1e-2;
        let mut opt = OptimizerState::new(p.len(), lr);
        opt.step(&mut p, &g).unwrap();
        for i in 0..p.len() {
            let want = before[i] - lr * g[i] / (g[i].abs() + opt.epsilon);
            assert!((p.values()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = mlp_init(&[3, 4, 1], Activation::Gelu, 9).unwrap();
            let mut opt = OptimizerState::new(p.len(), 3e-4);
            for k in 0..10 {
                let g: Vec<f64> = (0..p.len()).map(|i| ((i + k) as f64).sin()).collect();
                opt.step(&mut p, &g).unwrap();
            }
            (p, opt)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        assert_eq!(p1.values(), p2.values());
        assert_eq!(o1, o2);
    }

    proptest! {
        #[test]
        fn clip_norm_bound_and_direction(
            g in proptest::collection::vec(-50.0f64..50.0, 1..20),
            max_norm in 0.01f64..10.0,
        ) {
            let c = clip_global_norm(&g, max_norm).unwrap();
            prop_assert!(global_norm(&c) <= max_norm + 1e-12);
            // Direction preserved: c = s * g with s in (0, 1].
            let n = global_norm(&g);
            if n > 0.0 {
                let s = global_norm(&c) / n;
                for (a, b) in g.iter().zip(&c) {
                    prop_assert!((b - s * a).abs() <= 1e-9 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn forward_is_pure(seed in 0u64..1000) {
            let p = mlp_init(&[2, 4, 2], Activation::Gelu, seed).unwrap();
            let x = [0.1, -0.2];
            let y1 = p.forward(&x).unwrap();
            let y2 = p.forward(&x).unwrap();
            prop_assert_eq!(y1, y2);
        }
    }
}
