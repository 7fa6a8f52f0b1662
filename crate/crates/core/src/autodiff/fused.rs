//! Block operations whose backward rule runs once per block.

use super::{AutodiffError, Graph, NodeId, Op, Result, TensorView};

/// Geometry of a valid-padding 2D convolution over an HWC tensor.
///
/// Kernels are laid out `[out_c][k_h][k_w][in_c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
}

impl Conv2dShape {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k_w) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.k_h * self.k_w * self.in_c
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.k_h == 0 || self.k_w == 0 || self.k_h > self.in_h || self.k_w > self.in_w {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_valid",
                detail: format!("{self:?}"),
            });
        }
        Ok(())
    }
}

/// `out[o] = bias[o] + Σ_i weight[o][i]·x[i]`, accumulated in index order.
///
/// The graph's dense op calls this same routine, so plain evaluations agree
/// bitwise with recorded ones.
pub fn dense_values(weight: &[f64], bias: Option<&[f64]>, x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(weight.len(), in_dim * out_dim);
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            acc
        })
        .collect()
}

/// Valid-padding convolution, output laid out HWC.
pub fn conv2d_values(input: &[f64], weight: &[f64], bias: Option<&[f64]>, s: &Conv2dShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let run = s.k_w * s.in_c;
    let mut out = Vec::with_capacity(oh * ow * s.out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..s.out_c {
                let mut acc = bias.map_or(0.0, |b| b[oc]);
                for ky in 0..s.k_h {
                    let ib = ((oy * s.stride + ky) * s.in_w + ox * s.stride) * s.in_c;
                    let wb = (oc * s.k_h + ky) * run;
                    for (w, v) in weight[wb..wb + run].iter().zip(&input[ib..ib + run]) {
                        acc += w * v;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[derive(Debug)]
pub(super) enum FusedOp {
    Dense {
        input: Vec<u32>,
        weight: u32,
        bias: Option<u32>,
        out_dim: usize,
        output_start: u32,
    },
    Conv2d {
        input: Vec<u32>,
        weight: u32,
        bias: Option<u32>,
        shape: Conv2dShape,
        output_start: u32,
    },
}

impl FusedOp {
    pub(super) fn output_start(&self) -> u32 {
        match self {
            FusedOp::Dense { output_start, .. } | FusedOp::Conv2d { output_start, .. } => *output_start,
        }
    }

    pub(super) fn with_output_start(mut self, start: u32) -> Self {
        match &mut self {
            FusedOp::Dense { output_start, .. } | FusedOp::Conv2d { output_start, .. } => *output_start = start,
        }
        self
    }

    pub(super) fn backward(&self, values: &[f64], grads: &mut [f64]) {
        match self {
            FusedOp::Dense { input, weight, bias, out_dim, output_start } => {
                let in_dim = input.len();
                let x: Vec<f64> = input.iter().map(|&i| values[i as usize]).collect();
                let w0 = *weight as usize;
                let o0 = *output_start as usize;
                let mut gx = vec![0.0; in_dim];
                for o in 0..*out_dim {
                    let g = grads[o0 + o];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(b) = bias {
                        grads[*b as usize + o] += g;
                    }
                    let row = w0 + o * in_dim;
                    for i in 0..in_dim {
                        grads[row + i] += g * x[i];
                        gx[i] += g * values[row + i];
                    }
                }
                for (&i, d) in input.iter().zip(gx) {
                    grads[i as usize] += d;
                }
            }
            FusedOp::Conv2d { input, weight, bias, shape: s, output_start } => {
                let x: Vec<f64> = input.iter().map(|&i| values[i as usize]).collect();
                let w0 = *weight as usize;
                let w = &values[w0..w0 + s.weight_len()];
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let run = s.k_w * s.in_c;
                let (oh, ow) = (s.out_h(), s.out_w());
                let mut out = *output_start as usize;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..s.out_c {
                            let g = grads[out];
                            out += 1;
                            if g == 0.0 {
                                continue;
                            }
                            if let Some(b) = bias {
                                grads[*b as usize + oc] += g;
                            }
                            for ky in 0..s.k_h {
                                let ib = ((oy * s.stride + ky) * s.in_w + ox * s.stride) * s.in_c;
                                let wb = (oc * s.k_h + ky) * run;
                                for k in 0..run {
                                    gx[ib + k] += g * w[wb + k];
                                    gw[wb + k] += g * x[ib + k];
                                }
                            }
                        }
                    }
                }
                for (j, d) in gw.into_iter().enumerate() {
                    grads[w0 + j] += d;
                }
                for (&i, d) in input.iter().zip(gx) {
                    grads[i as usize] += d;
                }
            }
        }
    }
}

fn contiguous_start(view: &TensorView, op: &'static str) -> Result<u32> {
    let nodes = view.nodes();
    let Some(first) = nodes.first() else {
        return Err(AutodiffError::ShapeMismatch { op, detail: "empty parameter block".into() });
    };
    if nodes.iter().enumerate().any(|(k, n)| n.index() != first.index() + k) {
        return Err(AutodiffError::ShapeMismatch {
            op,
            detail: "parameter block must be contiguous nodes".into(),
        });
    }
    Ok(first.0)
}

impl Graph {
    /// Affine map `weight·x + bias` with `weight` shaped `[out, in]`.
    ///
    /// `weight` and `bias` must be contiguous node blocks (as produced by
    /// binding a parameter tensor).
    pub fn dense(&mut self, x: &[NodeId], weight: &TensorView, bias: Option<&TensorView>) -> Result<Vec<NodeId>> {
        let in_dim = x.len();
        if weight.shape().len() != 2 || weight.shape()[1] != in_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "dense",
                detail: format!("weight {:?} for input width {in_dim}", weight.shape()),
            });
        }
        let out_dim = weight.shape()[0];
        if let Some(b) = bias {
            if b.numel() != out_dim {
                return Err(AutodiffError::ShapeMismatch {
                    op: "dense",
                    detail: format!("bias {:?} for output width {out_dim}", b.shape()),
                });
            }
        }
        let w0 = contiguous_start(weight, "dense")?;
        let b0 = bias.map(|b| contiguous_start(b, "dense")).transpose()?;
        let xv = self.values_of(x);
        let out = {
            let w = &self.values[w0 as usize..w0 as usize + in_dim * out_dim];
            let b = b0.map(|b0| &self.values[b0 as usize..b0 as usize + out_dim]);
            dense_values(w, b, &xv, out_dim)
        };
        let op = FusedOp::Dense {
            input: x.iter().map(|n| n.0).collect(),
            weight: w0,
            bias: b0,
            out_dim,
            output_start: 0,
        };
        Ok(self.push_fused(op, &out, Op::Dense))
    }

    /// Valid-padding convolution of an `[h, w, c]` input with an
    /// `[out_c, k_h, k_w, c]` kernel.
    pub fn conv2d_valid(
        &mut self,
        input: &TensorView,
        kernel: &TensorView,
        bias: Option<&TensorView>,
        stride: usize,
    ) -> Result<TensorView> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 3 || ks.len() != 4 || ks[3] != is[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_valid",
                detail: format!("input {is:?} kernel {ks:?}"),
            });
        }
        let shape = Conv2dShape {
            in_h: is[0],
            in_w: is[1],
            in_c: is[2],
            out_c: ks[0],
            k_h: ks[1],
            k_w: ks[2],
            stride,
        };
        shape.validate()?;
        if let Some(b) = bias {
            if b.numel() != shape.out_c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d_valid",
                    detail: format!("bias {:?} for {} channels", b.shape(), shape.out_c),
                });
            }
        }
        let w0 = contiguous_start(kernel, "conv2d_valid")?;
        let b0 = bias.map(|b| contiguous_start(b, "conv2d_valid")).transpose()?;
        let xv = self.values_of(input.nodes());
        let out = {
            let w = &self.values[w0 as usize..w0 as usize + shape.weight_len()];
            let b = b0.map(|b0| &self.values[b0 as usize..b0 as usize + shape.out_c]);
            conv2d_values(&xv, w, b, &shape)
        };
        let op = FusedOp::Conv2d {
            input: input.nodes().iter().map(|n| n.0).collect(),
            weight: w0,
            bias: b0,
            shape,
            output_start: 0,
        };
        let nodes = self.push_fused(op, &out, Op::Conv2d);
        TensorView::new(vec![shape.out_h(), shape.out_w(), shape.out_c], nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xin, wv, bv) = (random(&mut rng, 5), random(&mut rng, 15), random(&mut rng, 3));
        let eval = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            dense_values(w, Some(b), x, 3).iter().map(|v| v.tanh()).sum()
        };
        let mut g = Graph::new();
        let x: Vec<_> = xin.iter().map(|&v| g.leaf(v)).collect();
        let w = TensorView::leaves(&mut g, &[3, 5], &wv).unwrap();
        let b = TensorView::leaves(&mut g, &[3], &bv).unwrap();
        let y = g.dense(&x, &w, Some(&b)).unwrap();
        let t: Vec<_> = y.iter().map(|&n| g.tanh(n)).collect();
        let s = g.sum(&t);
        assert_eq!(g.value(s), eval(&xin, &wv, &bv));
        g.backward(s).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let (mut p, mut m) = (xin.clone(), xin.clone());
            p[i] += h;
            m[i] -= h;
            let n = (eval(&p, &wv, &bv) - eval(&m, &wv, &bv)) / (2.0 * h);
            assert!(relative_error(g.grad(x[i]).unwrap(), n) < 1e-6);
        }
        for j in 0..15 {
            let (mut p, mut m) = (wv.clone(), wv.clone());
            p[j] += h;
            m[j] -= h;
            let n = (eval(&xin, &p, &bv) - eval(&xin, &m, &bv)) / (2.0 * h);
            assert!(relative_error(g.grad(w.nodes()[j]).unwrap(), n) < 1e-6);
        }
    }

    #[test]
    fn conv_matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Conv2dShape { in_h: 6, in_w: 5, in_c: 2, out_c: 3, k_h: 3, k_w: 2, stride: 2 };
        let xin = random(&mut rng, 6 * 5 * 2);
        let wv = random(&mut rng, shape.weight_len());
        let bv = random(&mut rng, 3);
        // naive oracle with explicit index arithmetic
        let naive = |x: &[f64], w: &[f64]| -> Vec<f64> {
            let mut out = vec![];
            for oy in 0..shape.out_h() {
                for ox in 0..shape.out_w() {
                    for oc in 0..3 {
                        let mut acc = bv[oc];
                        for ky in 0..3 {
                            for kx in 0..2 {
                                for ci in 0..2 {
                                    let iy = oy * 2 + ky;
                                    let ix = ox * 2 + kx;
                                    acc += w[((oc * 3 + ky) * 2 + kx) * 2 + ci] * x[(iy * 5 + ix) * 2 + ci];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
            out
        };
        let fast = conv2d_values(&xin, &wv, Some(&bv), &shape);
        for (a, b) in fast.iter().zip(naive(&xin, &wv)) {
            assert!((a - b).abs() < 1e-14);
        }
        let loss = |x: &[f64], w: &[f64]| -> f64 { naive(x, w).iter().map(|v| v * v).sum() };
        let mut g = Graph::new();
        let x = TensorView::leaves(&mut g, &[6, 5, 2], &xin).unwrap();
        let w = TensorView::leaves(&mut g, &[3, 3, 2, 2], &wv).unwrap();
        let b = TensorView::leaves(&mut g, &[3], &bv).unwrap();
        let y = g.conv2d_valid(&x, &w, Some(&b), 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        let sq: Vec<_> = y.nodes().iter().map(|&n| g.mul(n, n)).collect();
        let s = g.sum(&sq);
        g.backward(s).unwrap();
        let h = 1e-6;
        for i in 0..xin.len() {
            let (mut p, mut m) = (xin.clone(), xin.clone());
            p[i] += h;
            m[i] -= h;
            let n = (loss(&p, &wv) - loss(&m, &wv)) / (2.0 * h);
            assert!(relative_error(g.grad(x.nodes()[i]).unwrap(), n) < 1e-6, "x{i}");
        }
        for j in 0..wv.len() {
            let (mut p, mut m) = (wv.clone(), wv.clone());
            p[j] += h;
            m[j] -= h;
            let n = (loss(&xin, &p) - loss(&xin, &m)) / (2.0 * h);
            assert!(relative_error(g.grad(w.nodes()[j]).unwrap(), n) < 1e-6, "w{j}");
        }
        let gb = g.grads_of(b.nodes()).unwrap();
        let expected: Vec<f64> = (0..3)
            .map(|oc| y.nodes().iter().skip(oc).step_by(3).map(|&n| 2.0 * g.value(n)).sum())
            .collect();
        for (a, e) in gb.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_contiguous_weights_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(1.0);
        let _gap = g.constant(0.0);
        let b = g.leaf(1.0);
        let w = TensorView::new(vec![1, 2], vec![a, b]).unwrap();
        let x = [g.constant(1.0), g.constant(2.0)];
        assert!(g.dense(&x, &w, None).is_err());
    }
}
