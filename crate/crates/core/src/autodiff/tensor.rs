use super::{AutodiffError, Graph, NodeId, Op, Result};

/// A shaped, row-major view over graph nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorView {
    shape: Vec<usize>,
    nodes: Vec<NodeId>,
}

impl TensorView {
    pub fn new(shape: Vec<usize>, nodes: Vec<NodeId>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != nodes.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor_view",
                detail: format!("shape {shape:?} needs {numel} nodes, got {}", nodes.len()),
            });
        }
        Ok(Self { shape, nodes })
    }

    pub fn leaves(graph: &mut Graph, shape: &[usize], values: &[f64]) -> Result<Self> {
        let nodes = values.iter().map(|&v| graph.leaf(v)).collect();
        Self::new(shape.to_vec(), nodes)
    }

    pub fn constants(graph: &mut Graph, shape: &[usize], values: &[f64]) -> Result<Self> {
        let nodes = values.iter().map(|&v| graph.constant(v)).collect();
        Self::new(shape.to_vec(), nodes)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<NodeId> {
        self.nodes
    }

    pub fn numel(&self) -> usize {
        self.nodes.len()
    }

    pub fn values(&self, graph: &Graph) -> Vec<f64> {
        graph.values_of(&self.nodes)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.nodes)
    }
}

impl Graph {
    pub fn relu_view(&mut self, x: &TensorView) -> TensorView {
        let nodes = x.nodes().iter().map(|&n| self.relu(n)).collect();
        TensorView { shape: x.shape.clone(), nodes }
    }

    pub fn tanh_view(&mut self, x: &TensorView) -> TensorView {
        let nodes = x.nodes().iter().map(|&n| self.tanh(n)).collect();
        TensorView { shape: x.shape.clone(), nodes }
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: &TensorView, b: &TensorView) -> Result<TensorView> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * m);
        let mut parents = Vec::with_capacity(2 * k);
        for i in 0..n {
            for j in 0..m {
                parents.clear();
                let mut acc = 0.0;
                for t in 0..k {
                    let (x, y) = (a.nodes[i * k + t], b.nodes[t * m + j]);
                    let (vx, vy) = (self.value(x), self.value(y));
                    acc += vx * vy;
                    parents.push((x, vy));
                    parents.push((y, vx));
                }
                out.push(self.push(acc, Op::MatMul, &parents));
            }
        }
        TensorView::new(vec![n, m], out)
    }

    fn pool(&mut self, x: &TensorView, window: usize, stride: usize, max: bool) -> Result<TensorView> {
        let s = x.shape();
        if s.len() != 3 || window == 0 || stride == 0 || window > s[0] || window > s[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: if max { "max_pool" } else { "avg_pool" },
                detail: format!("input {s:?} window {window} stride {stride}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = Vec::with_capacity(oh * ow * c);
        let area = (window * window) as f64;
        let mut parents = Vec::with_capacity(window * window);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    parents.clear();
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            parents.push(x.nodes[idx]);
                        }
                    }
                    let id = if max {
                        let mut best = 0;
                        for (k, &p) in parents.iter().enumerate().skip(1) {
                            if self.value(p) > self.value(parents[best]) {
                                best = k;
                            }
                        }
                        let v = self.value(parents[best]);
                        self.push(v, Op::MaxPool, &[(parents[best], 1.0)])
                    } else {
                        let mut acc = 0.0;
                        for &p in &parents {
                            acc += self.value(p);
                        }
                        let terms: Vec<_> = parents.iter().map(|&p| (p, 1.0 / area)).collect();
                        self.push(acc / area, Op::AvgPool, &terms)
                    };
                    out.push(id);
                }
            }
        }
        TensorView::new(vec![oh, ow, c], out)
    }

    /// Max pooling over square windows of an HWC tensor (first argmax wins).
    pub fn max_pool(&mut self, x: &TensorView, window: usize, stride: usize) -> Result<TensorView> {
        self.pool(x, window, stride, true)
    }

    pub fn avg_pool(&mut self, x: &TensorView, window: usize, stride: usize) -> Result<TensorView> {
        self.pool(x, window, stride, false)
    }

    /// Mean over the spatial axes of an HWC tensor, giving `[c]`.
    pub fn global_avg_pool(&mut self, x: &TensorView) -> Result<TensorView> {
        let s = x.shape();
        if s.len() != 3 || s[0] * s[1] == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("input {s:?}"),
            });
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let inv = 1.0 / hw as f64;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let terms: Vec<_> = (0..hw).map(|p| (x.nodes[p * c + ch], inv)).collect();
            let mut acc = 0.0;
            for &(n, _) in &terms {
                acc += self.value(n);
            }
            out.push(self.push(acc * inv, Op::AvgPool, &terms));
        }
        TensorView::new(vec![c], out)
    }

    /// Elementwise maximum across equally shaped views.
    pub fn elementwise_max(&mut self, views: &[TensorView]) -> Result<TensorView> {
        let Some(first) = views.first() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "elementwise_max",
                detail: "no inputs".into(),
            });
        };
        if views.iter().any(|v| v.shape != first.shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "elementwise_max",
                detail: "inputs differ in shape".into(),
            });
        }
        let mut out = Vec::with_capacity(first.numel());
        let mut column = Vec::with_capacity(views.len());
        for i in 0..first.numel() {
            column.clear();
            column.extend(views.iter().map(|v| v.nodes[i]));
            out.push(self.max_of(&column));
        }
        TensorView::new(first.shape.clone(), out)
    }
}
