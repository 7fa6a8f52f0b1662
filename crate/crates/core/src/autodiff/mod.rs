//! Reverse-mode automatic differentiation over scalar computation graphs.
//!
//! A [`Graph`] is an append-only arena built during one forward pass. Every
//! node stores its value and the local partial derivatives with respect to
//! its parents; [`Graph::backward`] then sweeps the arena in reverse creation
//! order, which is a valid reverse topological order by construction.
//!
//! Dense layers and convolutions are recorded as *fused* operations: their
//! outputs are contiguous nodes and the backward rule runs once for the whole
//! block instead of storing one edge per multiply-accumulate.
//!
//! ```
//! use mvtn::autodiff::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(2.0);
//! let y = g.leaf(3.0);
//! let loss = g.mul(x, y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x), Some(3.0));
//! assert_eq!(g.grad(y), Some(2.0));
//! ```

mod check;
mod dual;
mod fused;
mod tensor;

pub use dual::Dual;
pub use check::{central_differences, finite_diff_check, relative_error, GradCheckReport};
pub use fused::{conv2d_values, dense_values, Conv2dShape};
pub use tensor::TensorView;

use fused::FusedOp;
use thiserror::Error;

/// Errors raised while recording or differentiating a graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("domain error in {op}: input {value}")]
    DomainError { op: &'static str, value: f64 },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("backward has already run on this graph")]
    AlreadyDifferentiated,
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    PowConst,
    Sin,
    Cos,
    Asin,
    Atan2,
    Max2,
    Abs,
    Linear,
    Custom,
    MatMul,
    Dense,
    Conv2d,
    AvgPool,
    MaxPool,
    Reduce,
    SoftmaxCrossEntropy,
}

/// Append-only computation record for a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<f64>,
    ops: Vec<Op>,
    edge_offsets: Vec<u32>,
    edge_parents: Vec<u32>,
    edge_partials: Vec<f64>,
    fused: Vec<FusedOp>,
    leaves: Vec<NodeId>,
    grads: Option<Vec<f64>>,
    visited: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            edge_offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut edge_offsets = Vec::with_capacity(nodes + 1);
        edge_offsets.push(0);
        Self {
            values: Vec::with_capacity(nodes),
            ops: Vec::with_capacity(nodes),
            edge_offsets,
            edge_parents: Vec::with_capacity(edges),
            edge_partials: Vec::with_capacity(edges),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_parents.len()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.index()]
    }

    pub fn values_of(&self, ids: &[NodeId]) -> Vec<f64> {
        ids.iter().map(|&id| self.value(id)).collect()
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.ops[id.index()]
    }

    /// Parameter nodes registered with [`Graph::leaf`], in creation order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Number of nodes processed by the last backward sweep.
    pub fn backward_visits(&self) -> usize {
        self.visited
    }

    fn push(&mut self, value: f64, op: Op, parents: &[(NodeId, f64)]) -> NodeId {
        debug_assert!(value.is_finite(), "{op:?} produced {value}");
        let id = NodeId(self.values.len() as u32);
        self.values.push(value);
        self.ops.push(op);
        for &(p, d) in parents {
            self.edge_parents.push(p.0);
            self.edge_partials.push(d);
        }
        self.edge_offsets.push(self.edge_parents.len() as u32);
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// A differentiable input (parameter) node.
    pub fn leaf(&mut self, value: f64) -> NodeId {
        let id = self.push(value, Op::Leaf, &[]);
        self.leaves.push(id);
        id
    }

    /// Records a node whose value and local partials were computed by the
    /// caller. Used by fused kernels such as the rasterizer.
    pub fn custom(&mut self, value: f64, parents: &[(NodeId, f64)]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::DomainError { op: "custom", value });
        }
        if let Some(&(p, _)) = parents.iter().find(|(p, _)| p.index() >= self.len()) {
            return Err(AutodiffError::UnknownNode(p.index()));
        }
        Ok(self.push(value, Op::Custom, parents))
    }

    /// `constant + Σ coef·node`.
    pub fn linear(&mut self, terms: &[(NodeId, f64)], constant: f64) -> NodeId {
        let mut v = constant;
        for &(id, c) in terms {
            v += c * self.value(id);
        }
        self.push(v, Op::Linear, terms)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, Op::Mul, &[(a, vb), (b, va)])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb == 0.0 {
            return Err(AutodiffError::DomainError { op: "div", value: vb });
        }
        Ok(self.push(va / vb, Op::Div, &[(a, 1.0 / vb), (b, -va / (vb * vb))]))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(v, Op::Neg, &[(a, -1.0)])
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.linear(&[(a, 1.0)], c)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.linear(&[(a, c)], 0.0)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).exp();
        if !v.is_finite() {
            return Err(AutodiffError::DomainError { op: "exp", value: self.value(a) });
        }
        Ok(self.push(v, Op::Exp, &[(a, v)]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(AutodiffError::DomainError { op: "log", value: x });
        }
        Ok(self.push(x.ln(), Op::Log, &[(a, 1.0 / x)]))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).tanh();
        self.push(t, Op::Tanh, &[(a, 1.0 - t * t)])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = sigmoid(self.value(a));
        self.push(s, Op::Sigmoid, &[(a, s * (1.0 - s))])
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        if x > 0.0 {
            self.push(x, Op::Relu, &[(a, 1.0)])
        } else {
            self.push(0.0, Op::Relu, &[(a, 0.0)])
        }
    }

    /// Square root; the partial at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x < 0.0 {
            return Err(AutodiffError::DomainError { op: "sqrt", value: x });
        }
        let s = x.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        Ok(self.push(s, Op::Sqrt, &[(a, d)]))
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        let x = self.value(a);
        if (x < 0.0 && p.fract() != 0.0) || (x == 0.0 && p < 1.0) {
            return Err(AutodiffError::DomainError { op: "pow_const", value: x });
        }
        let v = x.powf(p);
        Ok(self.push(v, Op::PowConst, &[(a, p * x.powf(p - 1.0))]))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        self.push(x.sin(), Op::Sin, &[(a, x.cos())])
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        self.push(x.cos(), Op::Cos, &[(a, -x.sin())])
    }

    /// Defined on the open interval (−1, 1) where the derivative is finite.
    pub fn asin(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.abs() >= 1.0 {
            return Err(AutodiffError::DomainError { op: "asin", value: x });
        }
        Ok(self.push(x.asin(), Op::Asin, &[(a, 1.0 / (1.0 - x * x).sqrt())]))
    }

    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> Result<NodeId> {
        let (vy, vx) = (self.value(y), self.value(x));
        let r2 = vx * vx + vy * vy;
        if r2 == 0.0 {
            return Err(AutodiffError::DomainError { op: "atan2", value: 0.0 });
        }
        Ok(self.push(vy.atan2(vx), Op::Atan2, &[(y, vx / r2), (x, -vy / r2)]))
    }

    /// Ties route the gradient to the first argument.
    pub fn max2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        if va >= vb {
            self.push(va, Op::Max2, &[(a, 1.0), (b, 0.0)])
        } else {
            self.push(vb, Op::Max2, &[(a, 0.0), (b, 1.0)])
        }
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let d = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.push(x.abs(), Op::Abs, &[(a, d)])
    }

    pub fn sum(&mut self, nodes: &[NodeId]) -> NodeId {
        let terms: Vec<_> = nodes.iter().map(|&n| (n, 1.0)).collect();
        let mut v = 0.0;
        for &n in nodes {
            v += self.value(n);
        }
        self.push(v, Op::Reduce, &terms)
    }

    /// Maximum over `nodes`; the gradient flows to the first argmax only.
    pub fn max_of(&mut self, nodes: &[NodeId]) -> NodeId {
        assert!(!nodes.is_empty(), "max over an empty set");
        let mut best = nodes[0];
        for &n in &nodes[1..] {
            if self.value(n) > self.value(best) {
                best = n;
            }
        }
        let v = self.value(best);
        self.push(v, Op::Reduce, &[(best, 1.0)])
    }

    /// Mean cross-entropy of softmax(logits) against `label`; partials are
    /// `softmax − onehot`.
    pub fn softmax_cross_entropy(&mut self, logits: &[NodeId], label: usize) -> Result<NodeId> {
        if label >= logits.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {label} with {} logits", logits.len()),
            });
        }
        let vals = self.values_of(logits);
        let (loss, probs) = softmax_cross_entropy_values(&vals, label);
        let parents: Vec<_> = logits
            .iter()
            .zip(&probs)
            .enumerate()
            .map(|(k, (&id, &p))| (id, if k == label { p - 1.0 } else { p }))
            .collect();
        Ok(self.push(loss, Op::SoftmaxCrossEntropy, &parents))
    }

    fn push_fused(&mut self, op: FusedOp, outputs: &[f64], tag: Op) -> Vec<NodeId> {
        let first = self.values.len() as u32;
        self.fused.push(op.with_output_start(first));
        outputs.iter().map(|&v| self.push(v, tag, &[])).collect()
    }

    /// Runs the reverse sweep from `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.grads.is_some() {
            return Err(AutodiffError::AlreadyDifferentiated);
        }
        let root = loss.index();
        if root >= self.len() {
            return Err(AutodiffError::UnknownNode(root));
        }
        let mut grads = vec![0.0; self.len()];
        grads[root] = 1.0;
        let mut fused_cursor = self.fused.len();
        // skip fused blocks recorded after the loss
        while fused_cursor > 0 && self.fused[fused_cursor - 1].output_start() as usize > root {
            fused_cursor -= 1;
        }
        let mut visited = 0usize;
        for i in (0..=root).rev() {
            visited += 1;
            let g = grads[i];
            if g != 0.0 {
                let (s, e) = (self.edge_offsets[i] as usize, self.edge_offsets[i + 1] as usize);
                for k in s..e {
                    grads[self.edge_parents[k] as usize] += g * self.edge_partials[k];
                }
            }
            if fused_cursor > 0 && self.fused[fused_cursor - 1].output_start() as usize == i {
                fused_cursor -= 1;
                self.fused[fused_cursor].backward(&self.values, &mut grads);
            }
        }
        self.visited = visited;
        self.grads = Some(grads);
        Ok(())
    }

    /// Runs backward on a single-element view.
    pub fn backward_view(&mut self, loss: &TensorView) -> Result<()> {
        if loss.numel() != 1 {
            return Err(AutodiffError::NotScalar(loss.numel()));
        }
        self.backward(loss.nodes()[0])
    }

    /// Gradient of the loss with respect to `id`, once backward has run.
    pub fn grad(&self, id: NodeId) -> Option<f64> {
        self.grads.as_ref().map(|g| g[id.index()])
    }

    pub fn grads_of(&self, ids: &[NodeId]) -> Option<Vec<f64>> {
        let g = self.grads.as_ref()?;
        Some(ids.iter().map(|id| g[id.index()]).collect())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `(−log softmax(logits)[label], softmax(logits))`.
pub fn softmax_cross_entropy_values(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - m);
    (loss, exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(0.0);
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(1.0));
    }

    #[test]
    fn product_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(2.0);
        let y = g.leaf(3.0);
        let z = g.mul(x, y);
        g.backward(z).unwrap();
        assert_eq!(g.grads_of(&[x, y]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn chain_rule_through_tanh() {
        let mut g = Graph::new();
        let a = g.leaf(0.5);
        let b = g.leaf(2.0);
        let c = g.leaf(0.0);
        let ab = g.mul(a, b);
        let s = g.add(ab, c);
        let t = g.tanh(s);
        g.backward(t).unwrap();
        let expected = 1.0 - 1f64.tanh().powi(2);
        assert!((g.grad(c).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn max2_routes_to_larger() {
        let mut g = Graph::new();
        let a = g.leaf(3.0);
        let b = g.leaf(5.0);
        let m = g.max2(a, b);
        g.backward(m).unwrap();
        assert_eq!(g.grads_of(&[a, b]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn max2_tie_prefers_first() {
        let mut g = Graph::new();
        let a = g.leaf(1.0);
        let b = g.leaf(1.0);
        let m = g.max2(a, b);
        g.backward(m).unwrap();
        assert_eq!(g.grads_of(&[a, b]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_ce_two_way() {
        let mut g = Graph::new();
        let l = [g.leaf(0.0), g.leaf(0.0)];
        let loss = g.softmax_cross_entropy(&l, 0).unwrap();
        assert!((g.value(loss) - 2f64.ln()).abs() < 1e-15);
        g.backward(loss).unwrap();
        assert_eq!(g.grads_of(&l).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(1.0);
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(AutodiffError::AlreadyDifferentiated));
    }

    #[test]
    fn backward_view_requires_scalar() {
        let mut g = Graph::new();
        let v = TensorView::leaves(&mut g, &[2], &[1.0, 2.0]).unwrap();
        assert_eq!(g.backward_view(&v), Err(AutodiffError::NotScalar(2)));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let z = g.constant(0.0);
        let n = g.constant(-1.0);
        let one = g.constant(1.0);
        assert!(matches!(g.log(z), Err(AutodiffError::DomainError { .. })));
        assert!(matches!(g.div(one, z), Err(AutodiffError::DomainError { .. })));
        assert!(matches!(g.sqrt(n), Err(AutodiffError::DomainError { .. })));
        assert!(matches!(g.asin(one), Err(AutodiffError::DomainError { .. })));
        assert!(matches!(g.atan2(z, z), Err(AutodiffError::DomainError { .. })));
    }

    #[test]
    fn unary_partials_match_central_differences() {
        type Build = fn(&mut Graph, NodeId) -> NodeId;
        let cases: Vec<(Build, fn(f64) -> f64, f64)> = vec![
            (|g, x| g.exp(x).unwrap(), f64::exp, 0.3),
            (|g, x| g.log(x).unwrap(), f64::ln, 1.7),
            (|g, x| g.tanh(x), f64::tanh, -0.4),
            (|g, x| g.sigmoid(x), sigmoid, 0.9),
            (|g, x| g.relu(x), |x| x.max(0.0), 0.6),
            (|g, x| g.sqrt(x).unwrap(), f64::sqrt, 2.5),
            (|g, x| g.pow_const(x, 2.5).unwrap(), |x| x.powf(2.5), 1.3),
            (|g, x| g.sin(x), f64::sin, 0.7),
            (|g, x| g.cos(x), f64::cos, 0.7),
            (|g, x| g.asin(x).unwrap(), f64::asin, 0.35),
            (|g, x| g.abs(x), f64::abs, -0.8),
            (|g, x| g.neg(x), |x| -x, 0.2),
        ];
        for (build, f, x0) in cases {
            let mut g = Graph::new();
            let x = g.leaf(x0);
            let y = build(&mut g, x);
            assert_eq!(g.value(y), f(x0));
            g.backward(y).unwrap();
            let a = g.grad(x).unwrap();
            let n = numeric(f, x0);
            assert!(relative_error(a, n) < 1e-6, "x0={x0}: {a} vs {n}");
        }
    }

    #[test]
    fn binary_partials_match_central_differences() {
        let (ya, xa) = (0.4, -1.3);
        let mut g = Graph::new();
        let y = g.leaf(ya);
        let x = g.leaf(xa);
        let q = g.div(y, x).unwrap();
        let t = g.atan2(y, x).unwrap();
        let s = g.add(q, t);
        g.backward(s).unwrap();
        let f = |yy: f64, xx: f64| yy / xx + yy.atan2(xx);
        let dy = numeric(|v| f(v, xa), ya);
        let dx = numeric(|v| f(ya, v), xa);
        assert!(relative_error(g.grad(y).unwrap(), dy) < 1e-6);
        assert!(relative_error(g.grad(x).unwrap(), dx) < 1e-6);
    }

    #[test]
    fn backward_visits_every_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(0.3);
        let mut acc = x;
        for _ in 0..50 {
            let t = g.tanh(acc);
            acc = g.add(t, x);
        }
        g.backward(acc).unwrap();
        assert_eq!(g.backward_visits(), g.len());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(3.0);
        let y = g.mul(x, x);
        let z = g.add(y, x);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x), Some(7.0));
    }
}
