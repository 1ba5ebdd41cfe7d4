//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors, with exactly the operators the model and losses need.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are computed
//! eagerly when a node is pushed; [`Graph::backward`] walks the tape once in
//! reverse. All kernels are sequential, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as `[rows, rest]`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a row when viewed as `[rows, rest]`.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `a` is `m × k` after the
/// optional transpose and `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe exactly
    // those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Abs(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol {
        x: Var,
        s: Var,
        col: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    RowSqNorm(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherSplitMean {
        w: Var,
        selection: Vec<usize>,
        splits: usize,
        neighbors: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `[B, C, H, W] ⊛ [O, C, k, k] + bias[O]`, stride 1, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = &self.nodes[x.0].value.shape;
        let ws = &self.nodes[w.0].value.shape;
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d kernel must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            pad: ws[2] / 2,
        };
        let hw = geom.h * geom.w;
        let ckk = geom.in_ch * geom.k * geom.k;
        let mut cols = vec![0.0; geom.batch * ckk * hw];
        let mut out = vec![0.0; geom.batch * geom.out_ch * hw];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for n in 0..geom.batch {
                let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
                im2col(&xv[n * geom.in_ch * hw..(n + 1) * geom.in_ch * hw], geom, col);
                let o = &mut out[n * geom.out_ch * hw..(n + 1) * geom.out_ch * hw];
                for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(bv[oc]);
                }
                gemm(geom.out_ch, ckk, hw, wv, false, col, false, o, 1.0);
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(vec![geom.batch, geom.out_ch, geom.h, geom.w], out),
            Op::Conv2d { x, w, b, geom, cols },
            needs,
        )
    }

    /// Group normalization over `[B, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let shape = self.nodes[x.0].value.shape.clone();
        let (b, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        assert!(
            groups > 0 && c % groups == 0,
            "channels {c} not divisible into {groups} groups"
        );
        let cpg = c / groups;
        let gsize = cpg * hw;
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; b * groups];
        let mut out = vec![0.0; xv.len()];
        for n in 0..b {
            for g in 0..groups {
                let start = (n * c + g * cpg) * hw;
                let seg = &xv[start..start + gsize];
                let mean = seg.iter().sum::<f64>() / gsize as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[n * groups + g] = is;
                for (i, v) in seg.iter().enumerate() {
                    let xh = (v - mean) * is;
                    let ch = g * cpg + i / hw;
                    xhat[start + i] = xh;
                    out[start + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// NaN passes through.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(
            v.shape.clone(),
            v.data.iter().map(|&a| if a < 0.0 { 0.0 } else { a }).collect(),
        );
        let needs = self.ng(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Spatial extents of 1 pass through unchanged.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = (v.shape[0], v.shape[1], v.shape[2], v.shape[3]);
        let (kh, kw) = (if h >= 2 { 2 } else { 1 }, if w >= 2 { 2 } else { 1 });
        let (oh, ow) = (h / kh, w / kw);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * kh * w + j * kw;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let idx = base + (i * kh + di) * w + j * kw + dj;
                            // NaN wins so that corrupt inputs surface
                            if v.data[idx] > v.data[best] || v.data[idx].is_nan() {
                                best = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = v.data[best];
                    argmax[o] = best;
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::new(vec![b, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            needs,
        )
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (b, c) = (v.shape[0], v.shape[1]);
        let hw: usize = v.shape[2..].iter().product();
        let out: Vec<f64> = v
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::new(vec![b, c], out), Op::GlobalAvgPool(x), needs)
    }

    /// `x[B, K] · w[N, K]ᵀ + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (rows, k) = (xv.rows(), xv.row_len());
        let n = wv.rows();
        assert_eq!(wv.row_len(), k, "linear: inner dimensions differ");
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            assert_eq!(bv.len(), n, "linear: bias width");
            for r in out.chunks_mut(n) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, k, n, &xv.data, false, &wv.data, true, &mut out, 1.0);
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![rows, n], out), Op::Linear { x, w, b }, needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a.abs()).collect());
        let needs = self.ng(x);
        self.push(out, Op::Abs(x), needs)
    }

    /// Divides every row by `max(‖row‖₂, EPS_NORM)`.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let w = v.row_len();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for r in v.data.chunks(w) {
            let n = r
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(crate::geometry::EPS_NORM);
            norms.push(n);
            out.extend(r.iter().map(|a| a / n));
        }
        let out = Tensor::new(v.shape.clone(), out);
        let needs = self.ng(x);
        self.push(out, Op::NormalizeRows { x, norms }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a * s).collect());
        let needs = self.ng(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.len(),
            bv.len(),
            "elementwise op on {:?} and {:?}",
            av.shape,
            bv.shape
        );
        let out = Tensor::new(
            av.shape.clone(),
            av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        );
        let needs = self.ng(a) || self.ng(b);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of `x` by `s[i, col]`.
    pub fn mul_col(&mut self, x: Var, s: Var, col: usize) -> Var {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let (w, sw) = (xv.row_len(), sv.row_len());
        assert_eq!(xv.rows(), sv.rows());
        let mut out = xv.data.clone();
        for (i, r) in out.chunks_mut(w).enumerate() {
            let f = sv.data[i * sw + col];
            r.iter_mut().for_each(|a| *a *= f);
        }
        let out = Tensor::new(xv.shape.clone(), out);
        let needs = self.ng(x) || self.ng(s);
        self.push(out, Op::MulCol { x, s, col }, needs)
    }

    /// Concatenates `[B, *]` inputs along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let w = v.row_len();
        let mut out = Vec::with_capacity(v.len());
        for r in v.data.chunks(w) {
            out.extend(softmax(r));
        }
        let out = Tensor::new(v.shape.clone(), out);
        let needs = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), needs)
    }

    /// Squared L2 norm of every row: `[B, *] -> [B]`.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v
            .data
            .chunks(v.row_len())
            .map(|r| r.iter().map(|a| a * a).sum())
            .collect();
        let n = out.len();
        let needs = self.ng(x);
        self.push(Tensor::new(vec![n], out), Op::RowSqNorm(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Mean softmax cross-entropy of `[B, N]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = &self.nodes[logits.0].value;
        let n = v.row_len();
        assert_eq!(v.rows(), labels.len());
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = 0.0;
        for (r, &y) in v.data.chunks(n).zip(labels) {
            loss += log_sum_exp(r) - r[y];
            probs.extend(softmax(r));
        }
        loss /= labels.len() as f64;
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Split-wise prototype mean. `selection` holds, per sample and split,
    /// `neighbors` row indices into `w` (`[B * splits * neighbors]`); output
    /// row `b` concatenates the means of the selected rows' splits.
    pub fn gather_split_mean(
        &mut self,
        w: Var,
        selection: Vec<usize>,
        splits: usize,
        neighbors: usize,
    ) -> Var {
        let wv = &self.nodes[w.0].value;
        let d = wv.row_len();
        let width = d / splits;
        let per = splits * neighbors;
        let batch = selection.len() / per;
        let inv = 1.0 / neighbors as f64;
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for k in 0..splits {
                let o = &mut out[b * d + k * width..b * d + (k + 1) * width];
                for &i in &selection[b * per + k * neighbors..b * per + (k + 1) * neighbors] {
                    let src = &wv.data[i * d + k * width..i * d + (k + 1) * width];
                    o.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                }
                o.iter_mut().for_each(|a| *a *= inv);
            }
        }
        let needs = self.ng(w);
        self.push(
            Tensor::new(vec![batch, d], out),
            Op::GatherSplitMean {
                w,
                selection,
                splits,
                neighbors,
            },
            needs,
        )
    }

    /// `Σ weight · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.nodes[v.0].value.item()).sum();
        let needs = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let hw = geom.h * geom.w;
                let ckk = geom.in_ch * geom.k * geom.k;
                let osz = geom.out_ch * hw;
                if self.ng(*b) {
                    let gb = add_into(&mut grads[b.0], geom.out_ch);
                    for n in 0..geom.batch {
                        for (oc, chunk) in gy[n * osz..(n + 1) * osz].chunks(hw).enumerate() {
                            gb[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if self.ng(*w) {
                    let gw = add_into(&mut grads[w.0], geom.out_ch * ckk);
                    for n in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            hw,
                            ckk,
                            &gy[n * osz..(n + 1) * osz],
                            false,
                            &cols[n * ckk * hw..(n + 1) * ckk * hw],
                            true,
                            gw,
                            1.0,
                        );
                    }
                }
                if self.ng(*x) {
                    let wv = &val(*w).data;
                    let isz = geom.in_ch * hw;
                    let gx = add_into(&mut grads[x.0], geom.batch * isz);
                    let mut dcol = vec![0.0; ckk * hw];
                    for n in 0..geom.batch {
                        gemm(
                            ckk,
                            geom.out_ch,
                            hw,
                            wv,
                            true,
                            &gy[n * osz..(n + 1) * osz],
                            false,
                            &mut dcol,
                            0.0,
                        );
                        col2im(&dcol, *geom, &mut gx[n * isz..(n + 1) * isz]);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = &node.value.shape;
                let (b, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let cpg = c / groups;
                let gsize = cpg * hw;
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for n in 0..b {
                        for ch in 0..c {
                            let s = (n * c + ch) * hw;
                            for i in s..s + hw {
                                gg[ch] += gy[i] * xhat[i];
                                gbeta[ch] += gy[i];
                            }
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads[beta.0], gbeta);
                    }
                }
                if self.ng(*x) {
                    let gv = &val(*gamma).data;
                    let gx = add_into(&mut grads[x.0], gy.len());
                    let mut dxhat = vec![0.0; gsize];
                    for n in 0..b {
                        for g in 0..*groups {
                            let start = (n * c + g * cpg) * hw;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for i in 0..gsize {
                                let d = gy[start + i] * gv[g * cpg + i / hw];
                                dxhat[i] = d;
                                sum_d += d;
                                sum_dx += d * xhat[start + i];
                            }
                            let is = inv_std[n * groups + g];
                            let m = gsize as f64;
                            for i in 0..gsize {
                                gx[start + i] += is / m * (m * dxhat[i] - sum_d - xhat[start + i] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &val(*x).data;
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::MaxPool2 { x, argmax } => {
                let n = val(*x).len();
                let gx = add_into(&mut grads[x.0], n);
                for (g, &i) in gy.iter().zip(argmax) {
                    gx[i] += g;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let hw: usize = xv.shape[2..].iter().product();
                let inv = 1.0 / hw as f64;
                let d = gy.iter().flat_map(|g| std::iter::repeat_n(g * inv, hw)).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, k, n) = (xv.rows(), xv.row_len(), wv.rows());
                if self.ng(*x) {
                    let gx = add_into(&mut grads[x.0], rows * k);
                    gemm(rows, n, k, gy, false, &wv.data, false, gx, 1.0);
                }
                if self.ng(*w) {
                    let gw = add_into(&mut grads[w.0], n * k);
                    gemm(n, rows, k, gy, true, &xv.data, false, gw, 1.0);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = add_into(&mut grads[b.0], n);
                        for r in gy.chunks(n) {
                            gb.iter_mut().zip(r).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = &val(*x).data;
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, a)| if *a < 0.0 { -g } else { *g })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let w = y.row_len();
                let eps = crate::geometry::EPS_NORM;
                let mut d = Vec::with_capacity(gy.len());
                for ((yr, gr), &n) in y.data.chunks(w).zip(gy.chunks(w)).zip(norms) {
                    if n > eps {
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(a, g)| (g - a * proj) / n));
                    } else {
                        d.extend(gr.iter().map(|g| g / n));
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::Scale(x, s) => accumulate(&mut grads[x.0], gy.iter().map(|g| g * s).collect()),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        accumulate(&mut grads[v.0], gy.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::MulCol { x, s, col } => {
                let (xv, sv) = (val(*x), val(*s));
                let (w, sw) = (xv.row_len(), sv.row_len());
                if self.ng(*x) {
                    let d = gy
                        .chunks(w)
                        .enumerate()
                        .flat_map(|(i, r)| {
                            let f = sv.data[i * sw + col];
                            r.iter().map(move |g| g * f)
                        })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                if self.ng(*s) {
                    let gs = add_into(&mut grads[s.0], sv.len());
                    for (i, (gr, xr)) in gy.chunks(w).zip(xv.data.chunks(w)).enumerate() {
                        gs[i * sw + col] += gr.iter().zip(xr).map(|(g, a)| g * a).sum::<f64>();
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.row_len();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).row_len();
                    if self.ng(*p) {
                        let d = gy
                            .chunks(total)
                            .flat_map(|r| r[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(&mut grads[p.0], d);
                    }
                    offset += w;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let w = y.row_len();
                let mut d = Vec::with_capacity(gy.len());
                for (yr, gr) in y.data.chunks(w).zip(gy.chunks(w)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(a, g)| a * (g - dotp)));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::RowSqNorm(x) => {
                let xv = val(*x);
                let w = xv.row_len();
                let d = xv
                    .data
                    .chunks(w)
                    .zip(gy)
                    .flat_map(|(r, g)| r.iter().map(move |a| 2.0 * a * g))
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(&mut grads[x.0], vec![gy[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = val(*logits).row_len();
                let scale = gy[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * n + y] -= scale;
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::GatherSplitMean {
                w,
                selection,
                splits,
                neighbors,
            } => {
                let wv = val(*w);
                let d = wv.row_len();
                let width = d / splits;
                let per = splits * neighbors;
                let inv = 1.0 / *neighbors as f64;
                let gw = add_into(&mut grads[w.0], wv.len());
                for (b, gr) in gy.chunks(d).enumerate() {
                    for k in 0..*splits {
                        let src = &gr[k * width..(k + 1) * width];
                        for &i in &selection[b * per + k * neighbors..b * per + (k + 1) * neighbors] {
                            let dst = &mut gw[i * d + k * width..i * d + (k + 1) * width];
                            dst.iter_mut().zip(src).for_each(|(a, g)| *a += g * inv);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.ng(v) {
                        accumulate(&mut grads[v.0], vec![gy[0] * c]);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax(r: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|a| (a - max).exp()).sum();
    r.iter().map(move |a| (a - max).exp() / z)
}

pub(crate) fn log_sum_exp(r: &[f64]) -> f64 {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + r.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let hw = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[i * g.w..(i + 1) * g.w];
                    if si < 0 || si >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[c * hw + si as usize * g.w..c * hw + (si as usize + 1) * g.w];
                    for (j, out) in line.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - g.pad as isize;
                        *out = if sj < 0 || sj >= g.w as isize {
                            0.0
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: ConvGeom, x: &mut [f64]) {
    let hw = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - g.pad as isize;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    let base = c * hw + si as usize * g.w;
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - g.pad as isize;
                        if sj >= 0 && sj < g.w as isize {
                            x[base + sj as usize] += src[i * g.w + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `d loss / d inputs[which]`.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        for (which, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
            for i in 0..inputs[which].len() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[which].data[i] += h;
                let mut minus = inputs.clone();
                minus[which].data[i] -= h;
                let fp = {
                    let (g, _, o) = eval(&plus);
                    g.value(o).item()
                };
                let fm = {
                    let (g, _, o) = eval(&minus);
                    g.value(o).item()
                };
                let numeric = (fp - fm) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "input {which}[{i}]: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_norm_pool_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(vec![2, 2, 4, 4], &mut rng),
            random(vec![4, 2, 3, 3], &mut rng),
            random(vec![4], &mut rng),
            random(vec![4], &mut rng),
            random(vec![4], &mut rng),
            random(vec![2, 4], &mut rng),
        ];
        check(inputs, |g, v| {
            let c = g.conv2d(v[0], v[1], v[2]);
            let n = g.group_norm(c, v[3], v[4], 2);
            let r = g.relu(n);
            let p = g.max_pool2(r);
            let a = g.global_avg_pool(p);
            let m = g.mul(a, v[5]);
            let s = g.row_sq_norm(m);
            g.mean(s)
        });
    }

    #[test]
    fn head_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random(vec![3, 4], &mut rng),
            random(vec![5, 4], &mut rng),
            random(vec![5], &mut rng),
            random(vec![3, 2], &mut rng),
            random(vec![3, 5], &mut rng),
        ];
        check(inputs, |g, v| {
            let l = g.linear(v[0], v[1], Some(v[2]));
            let n = g.normalize_rows(l);
            let sm = g.softmax_rows(v[3]);
            let w0 = g.mul_col(n, sm, 0);
            let w1 = g.mul_col(v[4], sm, 1);
            let s = g.add(w0, w1);
            let d = g.sub(s, v[4]);
            let cat = g.concat_cols(&[d, v[3]]);
            let q = g.row_sq_norm(cat);
            let m = g.mean(q);
            let ce = g.cross_entropy(l, &[0, 3, 4]);
            g.weighted_sum(&[(m, 0.7), (ce, 1.3)])
        });
    }

    #[test]
    fn abs_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(vec![4, 6], &mut rng), random(vec![2, 6], &mut rng)];
        check(inputs, |g, v| {
            let a = g.abs(v[0]);
            // 2 samples, 3 splits, 2 neighbours
            let r = g.gather_split_mean(a, vec![0, 1, 2, 3, 1, 0, 3, 2, 2, 1, 0, 0], 3, 2);
            let s = g.scale(r, 2.5);
            let d = g.sub(s, v[1]);
            let q = g.row_sq_norm(d);
            g.mean(q)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let s = g.add(x, d);
        let q = g.row_sq_norm(s);
        let m = g.mean(q);
        let grads = g.backward(m);
        // d/dx (x + c)^2 = 2(x + c) with c = x
        assert_eq!(grads.get(x).unwrap(), &[4.0, 8.0]);
        assert!(grads.get(d).is_none());
    }
}
