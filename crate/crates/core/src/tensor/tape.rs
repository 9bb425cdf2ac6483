//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass appends nodes to the tape in execution order, so node
//! indices are already a topological order: `backward` walks the tape once in
//! reverse and each node's gradient is complete before it is propagated.
//! One tape serves one sample; independent samples run on independent tapes.

use std::sync::Arc;

use super::kernels;
pub use super::kernels::PadMode;
use super::{check_finite, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Temperature of a row softmax.
///
/// `Const` is an untrainable positive scale used as-is. `Var` references a
/// signed scalar on the tape: its absolute value is taken and floored at
/// [`Tape::SCALE_FLOOR`]. The raw parameter is never modified; floor hits
/// are only counted for diagnostics.
#[derive(Debug, Clone, Copy)]
pub enum ScaleArg {
    Const(f64),
    Var(TensorRef),
}

/// Static gather table: `slots` candidate source rows per output row, with
/// `-1` marking out-of-bounds candidates that are excluded from softmax and
/// mixing alike.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    pub rows: usize,
    pub slots: usize,
    /// Row-major `[rows * slots]`; entries in `[0, src_count)` or -1.
    pub idx: Vec<i32>,
    pub src_count: usize,
}

impl IndexTable {
    pub fn new(rows: usize, slots: usize, idx: Vec<i32>, src_count: usize) -> Result<Self> {
        if idx.len() != rows * slots {
            return Err(TensorError::ShapeMismatch {
                op: "IndexTable::new",
                detail: format!("{} entries for {}x{}", idx.len(), rows, slots),
            });
        }
        if idx.iter().any(|&i| i >= src_count as i32 || i < -1) {
            return Err(TensorError::Domain {
                op: "IndexTable::new",
                detail: "index outside source range".into(),
            });
        }
        if (0..rows).any(|r| idx[r * slots..(r + 1) * slots].iter().all(|&i| i < 0)) {
            return Err(TensorError::Domain {
                op: "IndexTable::new",
                detail: "a row has no valid candidate".into(),
            });
        }
        Ok(IndexTable { rows, slots, idx, src_count })
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.idx[r * self.slots..(r + 1) * self.slots]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    Matmul(TensorRef, TensorRef),
    MatmulTn(TensorRef, TensorRef),
    MatmulNt(TensorRef, TensorRef),
    Transpose(TensorRef),
    LinearCols { x: TensorRef, w: TensorRef, b: Option<TensorRef> },
    Conv2d { x: TensorRef, w: TensorRef, b: Option<TensorRef>, stride: usize, pad: usize, mode: PadMode },
    AvgPool2(TensorRef),
    LayerNormCols { x: TensorRef, gain: TensorRef, bias: TensorRef, eps: f64 },
    L2NormCols(TensorRef),
    SoftmaxRows { x: TensorRef, scale: ScaleArg },
    GatherDotCols { q: TensorRef, k: TensorRef, table: Arc<IndexTable> },
    GatherSoftmaxRows { x: TensorRef, scale: ScaleArg, table: Arc<IndexTable> },
    GatherMixRows { w: TensorRef, m: TensorRef, table: Arc<IndexTable> },
    Sigmoid(TensorRef),
    Tanh(TensorRef),
    Silu(TensorRef),
    Sum(TensorRef),
    Mean(TensorRef),
    SumAbs(TensorRef),
    BceMean { p: TensorRef, target: Arc<Vec<f64>> },
    DiceMean { p: TensorRef, target: Arc<Vec<f64>>, smoothing: f64 },
    NllRows { p: TensorRef, targets: Arc<Vec<usize>>, weights: Arc<Vec<f64>> },
    SelectCols { x: TensorRef, cols: Arc<Vec<usize>> },
    Reshape(TensorRef),
    UpsampleRows { x: TensorRef, from: (usize, usize), to: (usize, usize) },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. Nodes are appended in forward order and replayed once,
/// backward, by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_run: bool,
    scale_floor_hits: usize,
}

/// Probability floor shared by the cross-entropy style losses.
pub const PROB_FLOOR: f64 = 1e-7;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Trainable softmax temperatures are floored at this magnitude. The
    /// floor also caps the 1/t gradient amplification through the softmax,
    /// which destabilizes training if the regularizer pushes |s| to zero.
    pub const SCALE_FLOOR: f64 = 1e-3;

    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_run: false, scale_floor_hits: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times a trainable scale was clamped to the floor.
    pub fn scale_floor_hits(&self) -> usize {
        self.scale_floor_hits
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn detach(&self, t: TensorRef) -> Tensor {
        let n = &self.nodes[t.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is always valid")
    }

    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    /// Gradient-tracked input node.
    pub fn leaf(&mut self, value: &Tensor) -> TensorRef {
        self.push(value.shape().to_vec(), value.data().to_vec(), true, Op::Leaf)
    }

    /// Input node that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> TensorRef {
        self.push(value.shape().to_vec(), value.data().to_vec(), false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, rg: bool, op: Op) -> TensorRef {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "tape op produced a non-finite value"
        );
        self.nodes.push(Node { shape, data, requires_grad: rg, op });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn dims2(&self, op: &'static str, t: TensorRef) -> Result<(usize, usize)> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 2-D, got {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.same_shape("div", a, b)?;
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x / y).collect();
        check_finite("div", &data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        if !c.is_finite() {
            return Err(TensorError::Domain { op: "scale", detail: "non-finite factor".into() });
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a, c)))
    }

    // ---- matrix products ----

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// `aᵀ · b` with `a[k,m]`, `b[k,n]`
    pub fn matmul_tn(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ka, m) = self.dims2("matmul_tn", a)?;
        let (kb, n) = self.dims2("matmul_tn", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_tn_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulTn(a, b)))
    }

    /// `a · bᵀ` with `a[m,k]`, `b[n,k]`
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulNt(a, b)))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    /// `w[c_out,c_in] · x[c_in,n] (+ b[c_out] per column)` — a 1×1 convolution
    /// over flattened pixels.
    pub fn linear_cols(&mut self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> Result<TensorRef> {
        let (ci, n) = self.dims2("linear_cols", x)?;
        let (co, ciw) = self.dims2("linear_cols", w)?;
        if ci != ciw {
            return Err(TensorError::ShapeMismatch {
                op: "linear_cols",
                detail: format!("x channels {} vs w columns {}", ci, ciw),
            });
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear_cols",
                    detail: format!("bias {:?}, expected [{}]", self.nodes[b.0].shape, co),
                });
            }
        }
        let mut out = vec![0.0; co * n];
        if let Some(b) = b {
            let bias = &self.nodes[b.0].data;
            for (c, &bv) in bias.iter().enumerate() {
                out[c * n..(c + 1) * n].fill(bv);
            }
        }
        kernels::matmul_nn_acc(&self.nodes[w.0].data, &self.nodes[x.0].data, co, ci, n, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(vec![co, n], out, rg, Op::LinearCols { x, w, b }))
    }

    // ---- spatial ----

    /// Convolution over `x[c_in,h,w]` with `w[c_out,c_in,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<TensorRef> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}", xs, ws),
            });
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: "kernel larger than padded input".into(),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let bias = b.map(|b| self.nodes[b.0].data.as_slice().to_vec());
        let mut out = vec![0.0; c_out * oh * ow];
        kernels::conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias.as_deref(),
            c_in,
            h,
            wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            mode,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(vec![c_out, oh, ow], out, rg, Op::Conv2d { x, w, b, stride, pad, mode }))
    }

    /// Averages 2×2 blocks of `x[c,h,w]`; h and w must be even.
    pub fn avg_pool2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("expected [c,h,w], got {:?}", xs),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("odd spatial size {}x{}", h, w),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    out[ci * oh * ow + oy * ow + ox] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, rg, Op::AvgPool2(x)))
    }

    // ---- normalization ----

    /// Per-column (per-pixel) normalization of `x[c,n]` over the channel
    /// axis, then affine gain/bias of length c.
    pub fn layer_norm_cols(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        if eps <= 0.0 {
            return Err(TensorError::Domain { op: "layer_norm_cols", detail: "eps must be positive".into() });
        }
        let (c, n) = self.dims2("layer_norm_cols", x)?;
        if self.nodes[gain.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_cols",
                detail: "gain/bias must match channel count".into(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let bvec = &self.nodes[bias.0].data;
        let mut out = vec![0.0; c * n];
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..c {
                mean += src[i * n + j];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for i in 0..c {
                let d = src[i * n + j] - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                let xhat = (src[i * n + j] - mean) * inv;
                out[i * n + j] = g[i] * xhat + bvec[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(vec![c, n], out, rg, Op::LayerNormCols { x, gain, bias, eps }))
    }

    /// Scales every column of `x[c,n]` to unit length, guarding near-zero
    /// columns by dividing by `max(norm, 1e-12)`.
    pub fn l2_normalize_cols(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (c, n) = self.dims2("l2_normalize_cols", x)?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; c * n];
        for j in 0..n {
            let mut sq = 0.0;
            for i in 0..c {
                sq += src[i * n + j] * src[i * n + j];
            }
            let inv = 1.0 / sq.sqrt().max(L2_EPS);
            for i in 0..c {
                out[i * n + j] = src[i * n + j] * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, n], out, rg, Op::L2NormCols(x)))
    }

    // ---- softmax family ----

    fn resolve_scale(&mut self, op: &'static str, scale: ScaleArg) -> Result<f64> {
        match scale {
            ScaleArg::Const(s) => {
                if s <= 0.0 || !s.is_finite() {
                    return Err(TensorError::Domain {
                        op,
                        detail: format!("scale must be positive, got {}", s),
                    });
                }
                Ok(s)
            }
            ScaleArg::Var(t) => {
                if self.nodes[t.0].data.len() != 1 {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        detail: "scale parameter must be a scalar".into(),
                    });
                }
                let raw = self.nodes[t.0].data[0].abs();
                if raw < Self::SCALE_FLOOR {
                    self.scale_floor_hits += 1;
                }
                Ok(raw.max(Self::SCALE_FLOOR))
            }
        }
    }

    /// Row-wise softmax of `x[m,n] / scale`, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: TensorRef, scale: ScaleArg) -> Result<TensorRef> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        let t = self.resolve_scale("softmax_rows", scale)?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(&src[r * n..(r + 1) * n], t, &mut out[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x) || matches!(scale, ScaleArg::Var(s) if self.rg(s));
        Ok(self.push(vec![m, n], out, rg, Op::SoftmaxRows { x, scale }))
    }

    /// `out[r,j] = q[:,r] · k[:,table[r,j]]` with zeros at invalid slots.
    pub fn gather_dot_cols(
        &mut self,
        q: TensorRef,
        k: TensorRef,
        table: Arc<IndexTable>,
    ) -> Result<TensorRef> {
        let (cq, nq) = self.dims2("gather_dot_cols", q)?;
        let (ck, nk) = self.dims2("gather_dot_cols", k)?;
        if cq != ck || nq != table.rows || nk != table.src_count {
            return Err(TensorError::ShapeMismatch {
                op: "gather_dot_cols",
                detail: format!("q {:?}, k {:?}, table {}x{} src {}", (cq, nq), (ck, nk), table.rows, table.slots, table.src_count),
            });
        }
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let mut out = vec![0.0; table.rows * table.slots];
        for r in 0..table.rows {
            for (j, &src) in table.row(r).iter().enumerate() {
                if src < 0 {
                    continue;
                }
                let s = src as usize;
                let mut acc = 0.0;
                for c in 0..cq {
                    acc += qd[c * nq + r] * kd[c * nk + s];
                }
                out[r * table.slots + j] = acc;
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(vec![table.rows, table.slots], out, rg, Op::GatherDotCols { q, k, table }))
    }

    /// Row softmax restricted to the valid slots of `table`; invalid slots
    /// stay exactly zero and receive no gradient.
    pub fn gather_softmax_rows(
        &mut self,
        x: TensorRef,
        scale: ScaleArg,
        table: Arc<IndexTable>,
    ) -> Result<TensorRef> {
        let (m, n) = self.dims2("gather_softmax_rows", x)?;
        if m != table.rows || n != table.slots {
            return Err(TensorError::ShapeMismatch {
                op: "gather_softmax_rows",
                detail: format!("x {:?} vs table {}x{}", (m, n), table.rows, table.slots),
            });
        }
        let t = self.resolve_scale("gather_softmax_rows", scale)?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let valid = table.row(r);
            let mut mx = f64::NEG_INFINITY;
            for (j, &s) in valid.iter().enumerate() {
                if s >= 0 {
                    mx = mx.max(row[j]);
                }
            }
            let mut denom = 0.0;
            for (j, &s) in valid.iter().enumerate() {
                if s >= 0 {
                    let e = ((row[j] - mx) / t).exp();
                    out[r * n + j] = e;
                    denom += e;
                }
            }
            for (j, &s) in valid.iter().enumerate() {
                if s >= 0 {
                    out[r * n + j] /= denom;
                }
            }
        }
        let rg = self.rg(x) || matches!(scale, ScaleArg::Var(s) if self.rg(s));
        Ok(self.push(vec![m, n], out, rg, Op::GatherSoftmaxRows { x, scale, table }))
    }

    /// `out[r,:] = Σ_j w[r,j] · m[table[r,j],:]` — the sparse gather form of
    /// a row-stochastic matrix product.
    pub fn gather_mix_rows(
        &mut self,
        w: TensorRef,
        m: TensorRef,
        table: Arc<IndexTable>,
    ) -> Result<TensorRef> {
        let (rows, slots) = self.dims2("gather_mix_rows", w)?;
        let (src_rows, k) = self.dims2("gather_mix_rows", m)?;
        if rows != table.rows || slots != table.slots || src_rows != table.src_count {
            return Err(TensorError::ShapeMismatch {
                op: "gather_mix_rows",
                detail: format!(
                    "w {:?}, m {:?}, table {}x{} src {}",
                    (rows, slots),
                    (src_rows, k),
                    table.rows,
                    table.slots,
                    table.src_count
                ),
            });
        }
        let wd = &self.nodes[w.0].data;
        let md = &self.nodes[m.0].data;
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let orow = &mut out[r * k..(r + 1) * k];
            for (j, &src) in table.row(r).iter().enumerate() {
                if src < 0 {
                    continue;
                }
                let wv = wd[r * slots + j];
                if wv == 0.0 {
                    continue;
                }
                let mrow = &md[src as usize * k..(src as usize + 1) * k];
                for (o, &mv) in orow.iter_mut().zip(mrow) {
                    *o += wv * mv;
                }
            }
        }
        let rg = self.rg(w) || self.rg(m);
        Ok(self.push(vec![rows, k], out, rg, Op::GatherMixRows { w, m, table }))
    }

    // ---- pointwise nonlinearities ----

    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: TensorRef) -> Result<TensorRef> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Tanh(x)))
    }

    pub fn silu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, rg, Op::Silu(x)))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s], rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: TensorRef) -> Result<TensorRef> {
        let len = self.nodes[x.0].data.len();
        if len == 0 {
            return Err(TensorError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / len as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s], rg, Op::Mean(x)))
    }

    /// Σ|x| with subgradient sign(x), zero at the origin.
    pub fn sum_abs(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s: f64 = self.nodes[x.0].data.iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s], rg, Op::SumAbs(x)))
    }

    // ---- losses ----

    /// Mean binary cross-entropy over all entries, probabilities clamped to
    /// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn bce_mean(&mut self, p: TensorRef, target: &Tensor) -> Result<TensorRef> {
        if self.nodes[p.0].shape != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_mean",
                detail: format!("{:?} vs {:?}", self.nodes[p.0].shape, target.shape()),
            });
        }
        let pd = &self.nodes[p.0].data;
        let n = pd.len() as f64;
        let mut acc = 0.0;
        for (&pv, &tv) in pd.iter().zip(target.data()) {
            let pc = pv.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let rg = self.rg(p);
        let target = Arc::new(target.data().to_vec());
        Ok(self.push(vec![], vec![acc / n], rg, Op::BceMean { p, target }))
    }

    /// Mean over columns of `1 − (2·Σpt + σ)/(Σp + Σt + σ)`; each column of
    /// `p[n, masks]` is one mask.
    pub fn dice_mean(&mut self, p: TensorRef, target: &Tensor, smoothing: f64) -> Result<TensorRef> {
        if self.nodes[p.0].shape != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dice_mean",
                detail: format!("{:?} vs {:?}", self.nodes[p.0].shape, target.shape()),
            });
        }
        let (n, cols) = self.dims2("dice_mean", p)?;
        let pd = &self.nodes[p.0].data;
        let td = target.data();
        let mut acc = 0.0;
        for c in 0..cols {
            let mut inter = 0.0;
            let mut sp = 0.0;
            let mut st = 0.0;
            for r in 0..n {
                let pv = pd[r * cols + c];
                let tv = td[r * cols + c];
                inter += pv * tv;
                sp += pv;
                st += tv;
            }
            acc += 1.0 - (2.0 * inter + smoothing) / (sp + st + smoothing);
        }
        let rg = self.rg(p);
        let target = Arc::new(td.to_vec());
        Ok(self.push(vec![], vec![acc / cols as f64], rg, Op::DiceMean { p, target, smoothing }))
    }

    /// Weighted negative log-likelihood over rows of a probability matrix:
    /// `Σ_r weights[r] · (−ln max(p[r, targets[r]], PROB_FLOOR))`.
    pub fn nll_rows(&mut self, p: TensorRef, targets: &[usize], weights: &[f64]) -> Result<TensorRef> {
        let (rows, cols) = self.dims2("nll_rows", p)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "nll_rows",
                detail: format!("{} rows, {} targets, {} weights", rows, targets.len(), weights.len()),
            });
        }
        if targets.iter().any(|&t| t >= cols) {
            return Err(TensorError::Domain { op: "nll_rows", detail: "target class out of range".into() });
        }
        let pd = &self.nodes[p.0].data;
        let mut acc = 0.0;
        for r in 0..rows {
            let pv = pd[r * cols + targets[r]].max(PROB_FLOOR);
            acc -= weights[r] * pv.ln();
        }
        let rg = self.rg(p);
        Ok(self.push(
            vec![],
            vec![acc],
            rg,
            Op::NllRows { p, targets: Arc::new(targets.to_vec()), weights: Arc::new(weights.to_vec()) },
        ))
    }

    // ---- reindexing ----

    /// Column gather: `out[:, j] = x[:, cols[j]]`.
    pub fn select_cols(&mut self, x: TensorRef, cols: &[usize]) -> Result<TensorRef> {
        let (rows, n) = self.dims2("select_cols", x)?;
        if cols.iter().any(|&c| c >= n) {
            return Err(TensorError::Domain { op: "select_cols", detail: "column out of range".into() });
        }
        let src = &self.nodes[x.0].data;
        let p = cols.len();
        let mut out = vec![0.0; rows * p];
        for r in 0..rows {
            for (j, &c) in cols.iter().enumerate() {
                out[r * p + j] = src[r * n + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, p], out, rg, Op::SelectCols { x, cols: Arc::new(cols.to_vec()) }))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Reshape(x)))
    }

    /// Nearest-neighbor replication of grid rows: `x[h*w, k]` viewed on an
    /// `(h,w)` grid becomes `(H,W)` with integer replication factors.
    pub fn upsample_rows(
        &mut self,
        x: TensorRef,
        from: (usize, usize),
        to: (usize, usize),
    ) -> Result<TensorRef> {
        let (rows, k) = self.dims2("upsample_rows", x)?;
        if rows != from.0 * from.1 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_rows",
                detail: format!("{} rows vs grid {:?}", rows, from),
            });
        }
        if from.0 == 0 || from.1 == 0 || to.0 % from.0 != 0 || to.1 % from.1 != 0 {
            return Err(TensorError::Domain {
                op: "upsample_rows",
                detail: format!("target grid {:?} not divisible by source {:?}", to, from),
            });
        }
        let (fy, fx) = (to.0 / from.0, to.1 / from.1);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; to.0 * to.1 * k];
        for y in 0..to.0 {
            let sy = y / fy;
            for xcol in 0..to.1 {
                let sx = xcol / fx;
                let srow = (sy * from.1 + sx) * k;
                let orow = (y * to.1 + xcol) * k;
                out[orow..orow + k].copy_from_slice(&src[srow..srow + k]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![to.0 * to.1, k], out, rg, Op::UpsampleRows { x, from, to }))
    }

    // ---- backward ----

    /// Accumulates gradients for every `requires_grad` node reachable from
    /// `loss`. A second call is rejected; build a fresh tape instead.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.backward_run = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, t: TensorRef) -> &mut Vec<f64> {
        let len = self.nodes[t.0].data.len();
        self.grads[t.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn add_grad(&mut self, t: TensorRef, contrib: &[f64]) {
        if !self.rg(t) {
            return;
        }
        let g = self.ensure_grad(t);
        for (gv, &cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn propagate(&mut self, i: usize) {
        let op = self.nodes[i].op.clone();
        let g = self.grads[i].clone().expect("propagate called with gradient present");
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, &g);
                if self.rg(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv / bv).collect();
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Matmul(a, b) => {
                // C = A·B: dA = g·Bᵀ, dB = Aᵀ·g
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&g, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&self.nodes[a.0].data, &g, k, m, n, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulTn(a, b) => {
                // C = Aᵀ·B with A[k,m], B[k,n]: dA = B·gᵀ, dB = A·g
                let (k, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(a) {
                    let mut da = vec![0.0; k * m];
                    kernels::matmul_nt_acc(&self.nodes[b.0].data, &g, k, n, m, &mut da);
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_nn_acc(&self.nodes[a.0].data, &g, k, m, n, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulNt(a, b) => {
                // C = A·Bᵀ with A[m,k], B[n,k]: dA = g·B, dB = gᵀ·A
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nn_acc(&g, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(&g, &self.nodes[a.0].data, n, m, k, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.rg(a) {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] = g[r * m + c];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LinearCols { x, w, b } => {
                let (ci, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let co = self.nodes[w.0].shape[0];
                if self.rg(x) {
                    let mut dx = vec![0.0; ci * n];
                    kernels::matmul_tn_acc(&self.nodes[w.0].data, &g, ci, co, n, &mut dx);
                    self.add_grad(x, &dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; co * ci];
                    kernels::matmul_nt_acc(&g, &self.nodes[x.0].data, co, n, ci, &mut dw);
                    self.add_grad(w, &dw);
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let mut db = vec![0.0; co];
                        for c in 0..co {
                            db[c] = g[c * n..(c + 1) * n].iter().sum();
                        }
                        self.add_grad(b, &db);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad, mode } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let mut dx = if self.rg(x) { Some(vec![0.0; c_in * h * wd]) } else { None };
                let mut dw = if self.rg(w) { Some(vec![0.0; c_out * c_in * kh * kw]) } else { None };
                let mut db = match b {
                    Some(b) if self.rg(b) => Some(vec![0.0; c_out]),
                    _ => None,
                };
                kernels::conv2d_backward(
                    &self.nodes[x.0].data,
                    &self.nodes[w.0].data,
                    &g,
                    c_in,
                    h,
                    wd,
                    c_out,
                    kh,
                    kw,
                    stride,
                    pad,
                    mode,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.add_grad(x, &dx);
                }
                if let Some(dw) = dw {
                    self.add_grad(w, &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.add_grad(b, &db);
                }
            }
            Op::AvgPool2(x) => {
                if self.rg(x) {
                    let xs = &self.nodes[x.0].shape;
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[ci * oh * ow + oy * ow + ox];
                                let base = ci * h * w + 2 * oy * w + 2 * ox;
                                dx[base] += gv;
                                dx[base + 1] += gv;
                                dx[base + w] += gv;
                                dx[base + w + 1] += gv;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::LayerNormCols { x, gain, bias, eps } => {
                let (c, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let src = self.nodes[x.0].data.clone();
                let gvec = self.nodes[gain.0].data.clone();
                let mut dx = vec![0.0; c * n];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for j in 0..n {
                    let mut mean = 0.0;
                    for i2 in 0..c {
                        mean += src[i2 * n + j];
                    }
                    mean /= c as f64;
                    let mut var = 0.0;
                    for i2 in 0..c {
                        let d = src[i2 * n + j] - mean;
                        var += d * d;
                    }
                    var /= c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat = g ⊙ gain; dx = inv·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i2 in 0..c {
                        let xhat = (src[i2 * n + j] - mean) * inv;
                        let dxhat = g[i2 * n + j] * gvec[i2];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain[i2] += g[i2 * n + j] * xhat;
                        dbias[i2] += g[i2 * n + j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for i2 in 0..c {
                        let xhat = (src[i2 * n + j] - mean) * inv;
                        let dxhat = g[i2 * n + j] * gvec[i2];
                        dx[i2 * n + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::L2NormCols(x) => {
                if self.rg(x) {
                    let (c, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let src = &self.nodes[x.0].data;
                    let out = &self.nodes[i].data;
                    let mut dx = vec![0.0; c * n];
                    for j in 0..n {
                        let mut sq = 0.0;
                        for i2 in 0..c {
                            sq += src[i2 * n + j] * src[i2 * n + j];
                        }
                        let norm = sq.sqrt();
                        let inv = 1.0 / norm.max(L2_EPS);
                        if norm > L2_EPS {
                            // y = x/‖x‖: dx = (g − y·(y·g))/‖x‖
                            let mut dot = 0.0;
                            for i2 in 0..c {
                                dot += out[i2 * n + j] * g[i2 * n + j];
                            }
                            for i2 in 0..c {
                                dx[i2 * n + j] = (g[i2 * n + j] - out[i2 * n + j] * dot) * inv;
                            }
                        } else {
                            // guarded region is the linear map x/eps
                            for i2 in 0..c {
                                dx[i2 * n + j] = g[i2 * n + j] * inv;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::SoftmaxRows { x, scale } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let t = self.scale_value(scale);
                let y = self.nodes[i].data.clone();
                let src = self.nodes[x.0].data.clone();
                let mut dx = vec![0.0; m * n];
                let mut dt = 0.0;
                for r in 0..m {
                    let yrow = &y[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let w: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        // dL/du = y(g − Σgy); u = x/t
                        let du = yrow[j] * (grow[j] - w);
                        dx[r * n + j] = du / t;
                        dt -= du * src[r * n + j] / (t * t);
                    }
                }
                self.add_grad(x, &dx);
                self.backprop_scale(scale, dt);
            }
            Op::GatherDotCols { q, k, table } => {
                let cq = self.nodes[q.0].shape[0];
                let (nq, nk) = (self.nodes[q.0].shape[1], self.nodes[k.0].shape[1]);
                let qd = self.nodes[q.0].data.clone();
                let kd = self.nodes[k.0].data.clone();
                let mut dq = vec![0.0; cq * nq];
                let mut dk = vec![0.0; cq * nk];
                for r in 0..table.rows {
                    for (j, &src) in table.row(r).iter().enumerate() {
                        if src < 0 {
                            continue;
                        }
                        let s = src as usize;
                        let gv = g[r * table.slots + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..cq {
                            dq[c * nq + r] += gv * kd[c * nk + s];
                            dk[c * nk + s] += gv * qd[c * nq + r];
                        }
                    }
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
            }
            Op::GatherSoftmaxRows { x, scale, table } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let t = self.scale_value(scale);
                let y = self.nodes[i].data.clone();
                let src = self.nodes[x.0].data.clone();
                let mut dx = vec![0.0; m * n];
                let mut dt = 0.0;
                for r in 0..m {
                    let valid = table.row(r);
                    let mut w = 0.0;
                    for (j, &s) in valid.iter().enumerate() {
                        if s >= 0 {
                            w += y[r * n + j] * g[r * n + j];
                        }
                    }
                    for (j, &s) in valid.iter().enumerate() {
                        if s >= 0 {
                            let du = y[r * n + j] * (g[r * n + j] - w);
                            dx[r * n + j] = du / t;
                            dt -= du * src[r * n + j] / (t * t);
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.backprop_scale(scale, dt);
            }
            Op::GatherMixRows { w, m, table } => {
                let k = self.nodes[m.0].shape[1];
                let wd = self.nodes[w.0].data.clone();
                let md = self.nodes[m.0].data.clone();
                let mut dw = vec![0.0; table.rows * table.slots];
                let mut dm = vec![0.0; table.src_count * k];
                for r in 0..table.rows {
                    let grow = &g[r * k..(r + 1) * k];
                    for (j, &src) in table.row(r).iter().enumerate() {
                        if src < 0 {
                            continue;
                        }
                        let s = src as usize;
                        let mrow = &md[s * k..(s + 1) * k];
                        let mut acc = 0.0;
                        for (gv, mv) in grow.iter().zip(mrow) {
                            acc += gv * mv;
                        }
                        dw[r * table.slots + j] = acc;
                        let wv = wd[r * table.slots + j];
                        if wv != 0.0 {
                            let drow = &mut dm[s * k..(s + 1) * k];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
                self.add_grad(w, &dw);
                self.add_grad(m, &dm);
            }
            Op::Sigmoid(x) => {
                if self.rg(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Tanh(x) => {
                if self.rg(x) {
                    let dx: Vec<f64> =
                        g.iter().zip(&self.nodes[i].data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Silu(x) => {
                if self.rg(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Sum(x) => {
                if self.rg(x) {
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    self.add_grad(x, &dx);
                }
            }
            Op::Mean(x) => {
                if self.rg(x) {
                    let len = self.nodes[x.0].data.len();
                    let dx = vec![g[0] / len as f64; len];
                    self.add_grad(x, &dx);
                }
            }
            Op::SumAbs(x) => {
                if self.rg(x) {
                    let dx: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| g[0] * sign0(v)).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::BceMean { p, target } => {
                if self.rg(p) {
                    let pd = &self.nodes[p.0].data;
                    let inv_n = 1.0 / pd.len() as f64;
                    let dx: Vec<f64> = pd
                        .iter()
                        .zip(target.iter())
                        .map(|(&pv, &tv)| {
                            if pv <= PROB_FLOOR || pv >= 1.0 - PROB_FLOOR {
                                0.0
                            } else {
                                g[0] * inv_n * (-(tv / pv) + (1.0 - tv) / (1.0 - pv))
                            }
                        })
                        .collect();
                    self.add_grad(p, &dx);
                }
            }
            Op::DiceMean { p, target, smoothing } => {
                if self.rg(p) {
                    let (n, cols) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
                    let pd = &self.nodes[p.0].data;
                    let mut dx = vec![0.0; n * cols];
                    for c in 0..cols {
                        let mut inter = 0.0;
                        let mut sp = 0.0;
                        let mut st = 0.0;
                        for r in 0..n {
                            inter += pd[r * cols + c] * target[r * cols + c];
                            sp += pd[r * cols + c];
                            st += target[r * cols + c];
                        }
                        let denom = sp + st + smoothing;
                        let num = 2.0 * inter + smoothing;
                        for r in 0..n {
                            let tv = target[r * cols + c];
                            dx[r * cols + c] =
                                g[0] / cols as f64 * (num - 2.0 * tv * denom) / (denom * denom);
                        }
                    }
                    self.add_grad(p, &dx);
                }
            }
            Op::NllRows { p, targets, weights } => {
                if self.rg(p) {
                    let cols = self.nodes[p.0].shape[1];
                    let pd = &self.nodes[p.0].data;
                    let mut dx = vec![0.0; pd.len()];
                    for (r, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                        let pv = pd[r * cols + t];
                        if pv > PROB_FLOOR {
                            dx[r * cols + t] = -g[0] * w / pv;
                        }
                    }
                    self.add_grad(p, &dx);
                }
            }
            Op::SelectCols { x, cols } => {
                if self.rg(x) {
                    let (rows, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let p = cols.len();
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            dx[r * n + c] += g[r * p + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Reshape(x) => {
                self.add_grad(x, &g);
            }
            Op::UpsampleRows { x, from, to } => {
                if self.rg(x) {
                    let k = self.nodes[x.0].data.len() / (from.0 * from.1);
                    let (fy, fx) = (to.0 / from.0, to.1 / from.1);
                    let mut dx = vec![0.0; from.0 * from.1 * k];
                    for y in 0..to.0 {
                        let sy = y / fy;
                        for xcol in 0..to.1 {
                            let sx = xcol / fx;
                            let srow = (sy * from.1 + sx) * k;
                            let grow = (y * to.1 + xcol) * k;
                            for c in 0..k {
                                dx[srow + c] += g[grow + c];
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
        }
    }

    fn scale_value(&self, scale: ScaleArg) -> f64 {
        match scale {
            ScaleArg::Const(s) => s,
            ScaleArg::Var(t) => self.nodes[t.0].data[0].abs().max(Self::SCALE_FLOOR),
        }
    }

    fn backprop_scale(&mut self, scale: ScaleArg, dt: f64) {
        if let ScaleArg::Var(s) = scale {
            if self.rg(s) {
                let raw = self.nodes[s.0].data[0];
                // t = max(|s|, floor): no gradient inside the floored region,
                // sign(s) outside; sign(0) := 0.
                let dsign = if raw.abs() < Self::SCALE_FLOOR { 0.0 } else { sign0(raw) };
                let contrib = [dt * dsign];
                self.add_grad(s, &contrib);
            }
        }
    }
}

const L2_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max-subtracted row softmax with temperature `t`; exponents never exceed
/// zero, so any positive `t` is safe.
fn softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - mx) / t).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}
