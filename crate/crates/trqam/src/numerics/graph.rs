//! Reverse-mode gradients for scalar losses over one trainable network.
//!
//! The op set is closed: network application (affine layers + activation),
//! add, subtract, constant scale, elementwise product, squared norm, and
//! sum/mean/weighted-sum reductions. Values are computed eagerly when nodes
//! are built; [`LossGraph::grad_params`] runs one reverse sweep and returns
//! the exact gradient of a scalar root with respect to the bound network's
//! parameters.

use crate::error::{Error, Result};
use crate::numerics::{ForwardTrace, ParamVector};

/// Handle to a node in a [`LossGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Network { input: NodeId, trace: ForwardTrace },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    SquaredNorm(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Expression graph for one scalar loss, differentiable in the parameters of
/// the network bound at construction.
pub struct LossGraph<'p> {
    params: &'p ParamVector,
    nodes: Vec<Node>,
}

impl<'p> LossGraph<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of any node (e.g. to read the loss off the root).
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar node, got length {}",
                v.len()
            )));
        }
        Ok(v[0])
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Apply the bound network to `input`.
    pub fn network(&mut self, input: NodeId) -> Result<NodeId> {
        let trace = self.params.forward_trace(self.value(input))?;
        let value = trace.output().to_vec();
        Ok(self.push(Op::Network { input, trace }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::Shape(format!(
                "add: lengths {} vs {}",
                va.len(),
                vb.len()
            )));
        }
        let v = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::Shape(format!(
                "sub: lengths {} vs {}",
                va.len(),
                vb.len()
            )));
        }
        let v = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| c * x).collect();
        self.push(Op::Scale(a, c), v)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::Shape(format!(
                "mul_elem: lengths {} vs {}",
                va.len(),
                vb.len()
            )));
        }
        let v = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::MulElem(a, b), v))
    }

    /// `||a||^2`, a scalar.
    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        self.push(Op::SquaredNorm(a), vec![s])
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        self.weighted_sum(&terms.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>())
    }

    pub fn mean(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Domain("mean over empty term list".into()));
        }
        let w = 1.0 / terms.len() as f64;
        self.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(t, w) in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum expects scalar terms, got length {}",
                    v.len()
                )));
            }
            s += w * v[0];
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), vec![s]))
    }

    /// Exact reverse-mode gradient of the scalar rooted at `root` with
    /// respect to the bound network's parameters.
    pub fn grad_params(&self, root: NodeId) -> Result<Vec<f64>> {
        if self.value(root).len() != 1 {
            return Err(Error::UnsupportedOp(
                "gradient root must be a scalar".into(),
            ));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(vec![1.0]);
        let mut grads = vec![0.0; self.params.len()];

        for idx in (0..=root.0).rev() {
            let cot = match adjoints[idx].take() {
                Some(c) => c,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Network { input, trace } => {
                    let dx = self
                        .params
                        .backward_from_trace(trace, &cot, Some(1.0), &mut grads)?;
                    accumulate(&mut adjoints[input.0], &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[a.0], &cot);
                    accumulate(&mut adjoints[b.0], &cot);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints[a.0], &cot);
                    let neg: Vec<f64> = cot.iter().map(|c| -c).collect();
                    accumulate(&mut adjoints[b.0], &neg);
                }
                Op::Scale(a, c) => {
                    let s: Vec<f64> = cot.iter().map(|v| c * v).collect();
                    accumulate(&mut adjoints[a.0], &s);
                }
                Op::MulElem(a, b) => {
                    let va = self.value(*a).to_vec();
                    let vb = self.value(*b).to_vec();
                    let da: Vec<f64> = cot.iter().zip(&vb).map(|(c, y)| c * y).collect();
                    let db: Vec<f64> = cot.iter().zip(&va).map(|(c, x)| c * x).collect();
                    accumulate(&mut adjoints[a.0], &da);
                    accumulate(&mut adjoints[b.0], &db);
                }
                Op::SquaredNorm(a) => {
                    let va = self.value(*a);
                    let d: Vec<f64> = va.iter().map(|x| 2.0 * x * cot[0]).collect();
                    accumulate(&mut adjoints[a.0], &d);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        accumulate(&mut adjoints[t.0], &[w * cot[0]]);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(v) => {
            for (a, d) in v.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mlp_init, Activation};

    /// Central finite differences of a scalar loss in parameter space.
    fn fd_grad(
        params: &ParamVector,
        loss: impl Fn(&ParamVector) -> f64,
        eps: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        let mut p = params.clone();
        for i in 0..p.len() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + eps;
            let lp = loss(&p);
            p.values_mut()[i] = orig - eps;
            let lm = loss(&p);
            p.values_mut()[i] = orig;
            g[i] = (lp - lm) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn linear_regression_gradient_closed_form() {
        // loss = ||Wx - y||^2 for a single linear layer; grad_W = 2(Wx-y)x^T.
        let mut p = mlp_init(&[2, 2], Activation::Gelu, 0).unwrap();
        p.values_mut().copy_from_slice(&[1.0, -0.5, 0.25, 2.0, 0.0, 0.0]);
        let x = vec![0.8, -0.4];
        let y = vec![1.0, -1.0];
        let mut g = LossGraph::new(&p);
        let xin = g.constant(x.clone());
        let out = g.network(xin).unwrap();
        let target = g.constant(y.clone());
        let diff = g.sub(out, target).unwrap();
        let loss = g.squared_norm(diff);
        let grad = g.grad_params(loss).unwrap();

        let wx = [
            1.0 * 0.8 + (-0.5) * (-0.4),
            0.25 * 0.8 + 2.0 * (-0.4),
        ];
        let r = [wx[0] - y[0], wx[1] - y[1]];
        let want = [
            2.0 * r[0] * x[0],
            2.0 * r[0] * x[1],
            2.0 * r[1] * x[0],
            2.0 * r[1] * x[1],
            2.0 * r[0],
            2.0 * r[1],
        ];
        for (a, b) in grad.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = mlp_init(&[2, 3, 1], Activation::Gelu, 1).unwrap();
        let mut g = LossGraph::new(&p);
        let c = g.constant(vec![3.5]);
        let loss = g.scale(c, 2.0);
        let grad = g.grad_params(loss).unwrap();
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_squared_loss_matches_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh] {
            let p = mlp_init(&[3, 8, 8, 2], act, 17).unwrap();
            let inputs = [
                vec![0.3, -0.1, 0.9],
                vec![-0.5, 0.7, 0.2],
                vec![1.1, 0.4, -0.8],
            ];
            let targets = [vec![0.5, -0.5], vec![0.0, 1.0], vec![-1.0, 0.25]];

            let build = |pv: &ParamVector| -> f64 {
                let mut g = LossGraph::new(pv);
                let mut terms = Vec::new();
                for (x, y) in inputs.iter().zip(&targets) {
                    let xin = g.constant(x.clone());
                    let out = g.network(xin).unwrap();
                    let t = g.constant(y.clone());
                    let d = g.sub(out, t).unwrap();
                    terms.push(g.squared_norm(d));
                }
                let loss = g.mean(&terms).unwrap();
                g.scalar_value(loss).unwrap()
            };

            let mut g = LossGraph::new(&p);
            let mut terms = Vec::new();
            for (x, y) in inputs.iter().zip(&targets) {
                let xin = g.constant(x.clone());
                let out = g.network(xin).unwrap();
                let t = g.constant(y.clone());
                let d = g.sub(out, t).unwrap();
                terms.push(g.squared_norm(d));
            }
            let loss = g.mean(&terms).unwrap();
            let grad = g.grad_params(loss).unwrap();

            let fd = fd_grad(&p, build, 1e-5);
            for (i, (a, b)) in grad.iter().zip(&fd).enumerate() {
                let rel = (a - b).abs() / b.abs().max(1e-6);
                assert!(rel <= 1e-4, "param {i}: analytic {a} vs fd {b} ({act:?})");
            }
        }
    }

    #[test]
    fn mul_elem_and_weighted_sum_grad() {
        let p = mlp_init(&[2, 4, 2], Activation::Tanh, 23).unwrap();
        let weights = vec![0.3, -1.2];
        let build = |pv: &ParamVector| -> (f64, Option<Vec<f64>>) {
            let mut g = LossGraph::new(pv);
            let xin = g.constant(vec![0.6, -0.9]);
            let out = g.network(xin).unwrap();
            let w = g.constant(weights.clone());
            let prod = g.mul_elem(out, w).unwrap();
            let n = g.squared_norm(prod);
            let loss = g.weighted_sum(&[(n, 0.5)]).unwrap();
            let v = g.scalar_value(loss).unwrap();
            let grad = g.grad_params(loss).ok();
            (v, grad)
        };
        let (_, grad) = build(&p);
        let fd = fd_grad(&p, |pv| build(pv).0, 1e-5);
        for (a, b) in grad.unwrap().iter().zip(&fd) {
            let rel = (a - b).abs() / b.abs().max(1e-6);
            assert!(rel <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn non_scalar_root_is_unsupported() {
        let p = mlp_init(&[2, 2], Activation::Gelu, 0).unwrap();
        let mut g = LossGraph::new(&p);
        let xin = g.constant(vec![1.0, 2.0]);
        let out = g.network(xin).unwrap();
        assert!(matches!(
            g.grad_params(out),
            Err(Error::UnsupportedOp(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = mlp_init(&[2, 2], Activation::Gelu, 0).unwrap();
        let mut g = LossGraph::new(&p);
        let a = g.constant(vec![1.0, 2.0]);
        let b = g.constant(vec![1.0]);
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }
}
