//! Soft pixel-to-prototype assignment at a downsampling boundary.
//!
//! Given the feature map entering a 2× downsampling layer and the map leaving
//! it, both branches are layer-normalized, projected to a shared embedding
//! width by a 1×1 convolution, and column-normalized to unit length so inner
//! products are cosine similarities. The assignment matrix is the row softmax
//! of the similarity matrix divided by the magnitude of a trainable scale;
//! as the scale shrinks, the rows approach the one-hot argmax assignment.
//!
//! Two layouts are produced by independent code paths: a dense `N × N_d`
//! matrix, and a windowed form that scores each fine pixel only against the
//! 3×3 coarse neighborhood of its 2×2 parent window (linear in pixel count).

use std::sync::Arc;

use crate::tensor::{IndexTable, Result, ScaleArg, Tape, Tensor, TensorError, TensorRef};

/// Slots per row in the windowed layout: the parent coarse pixel plus its
/// eight neighbors.
pub const WINDOW_SLOTS: usize = 9;

/// Candidate table for one fine→coarse grid pair: row `r` (fine pixel,
/// row-major) lists the coarse indices of the 3×3 neighborhood around its
/// parent window, `-1` where the neighborhood leaves the grid.
pub fn window_table(fine: (usize, usize), coarse: (usize, usize)) -> Result<Arc<IndexTable>> {
    let (fh, fw) = fine;
    let (ch, cw) = coarse;
    if fh != 2 * ch || fw != 2 * cw || ch == 0 || cw == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "window_table",
            detail: format!("fine {:?} must be exactly twice coarse {:?}", fine, coarse),
        });
    }
    let mut idx = Vec::with_capacity(fh * fw * WINDOW_SLOTS);
    for y in 0..fh {
        for x in 0..fw {
            let (py, px) = (y / 2, x / 2);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = py as i64 + dy;
                    let nx = px as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= ch as i64 || nx >= cw as i64 {
                        idx.push(-1);
                    } else {
                        idx.push((ny * cw as i64 + nx) as i32);
                    }
                }
            }
        }
    }
    Ok(Arc::new(IndexTable::new(fh * fw, WINDOW_SLOTS, idx, ch * cw)?))
}

/// Parameters of one clustering module: separate layer-norm and 1×1
/// projection per branch (no sharing between branches or levels), plus the
/// signed trainable scale. All fields are tape refs bound by the caller.
#[derive(Debug, Clone, Copy)]
pub struct ClusteringRefs {
    pub ln_q_gain: TensorRef,
    pub ln_q_bias: TensorRef,
    pub ln_k_gain: TensorRef,
    pub ln_k_bias: TensorRef,
    pub proj_q_w: TensorRef,
    pub proj_q_b: TensorRef,
    pub proj_k_w: TensorRef,
    pub proj_k_b: TensorRef,
    /// Signed scalar; every use applies |scale|.
    pub scale: TensorRef,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm → 1×1 projection → column-wise l2 normalization, applied
/// independently to the pre- and post-downsample branches.
pub fn project_features(
    tape: &mut Tape,
    f_pre: TensorRef,
    f_post: TensorRef,
    params: &ClusteringRefs,
) -> Result<(TensorRef, TensorRef)> {
    let n = tape.shape(f_pre)[1];
    let nd = tape.shape(f_post)[1];
    if n != 4 * nd {
        return Err(TensorError::ShapeMismatch {
            op: "project_features",
            detail: format!("fine pixel count {} must be 4x coarse {}", n, nd),
        });
    }
    let q = tape.layer_norm_cols(f_pre, params.ln_q_gain, params.ln_q_bias, LAYER_NORM_EPS)?;
    let q = tape.linear_cols(q, params.proj_q_w, Some(params.proj_q_b))?;
    let q = tape.l2_normalize_cols(q)?;
    let k = tape.layer_norm_cols(f_post, params.ln_k_gain, params.ln_k_bias, LAYER_NORM_EPS)?;
    let k = tape.linear_cols(k, params.proj_k_w, Some(params.proj_k_b))?;
    let k = tape.l2_normalize_cols(k)?;
    Ok((q, k))
}

/// How a produced assignment stores its weights.
#[derive(Debug, Clone, PartialEq)]
pub enum AssignmentLayout {
    /// Row-stochastic `[N, N_d]`.
    Dense { weights: Tensor },
    /// `[N, 9]` weights over the candidate table; invalid slots hold zero.
    Windowed { weights: Tensor, table: Arc<IndexTable> },
}

/// Row-stochastic map from fine-grid pixels to coarse-grid prototypes,
/// detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub level: usize,
    pub fine_shape: (usize, usize),
    pub coarse_shape: (usize, usize),
    pub layout: AssignmentLayout,
}

/// Tape-resident counterpart of [`AssignmentMatrix`] used during training.
#[derive(Debug, Clone)]
pub struct AssignmentHandle {
    pub level: usize,
    pub fine_shape: (usize, usize),
    pub coarse_shape: (usize, usize),
    pub weights: TensorRef,
    /// Present for the windowed layout.
    pub table: Option<Arc<IndexTable>>,
}

impl AssignmentHandle {
    pub fn detach(&self, tape: &Tape) -> AssignmentMatrix {
        let weights = tape.detach(self.weights);
        let layout = match &self.table {
            Some(table) => AssignmentLayout::Windowed { weights, table: table.clone() },
            None => AssignmentLayout::Dense { weights },
        };
        AssignmentMatrix {
            level: self.level,
            fine_shape: self.fine_shape,
            coarse_shape: self.coarse_shape,
            layout,
        }
    }
}

fn check_unit_columns(tape: &Tape, t: TensorRef) {
    if cfg!(debug_assertions) {
        let (c, n) = (tape.shape(t)[0], tape.shape(t)[1]);
        let d = tape.data(t);
        for j in 0..n {
            let sq: f64 = (0..c).map(|i| d[i * n + j] * d[i * n + j]).sum();
            // tolerant: gradient probes nudge inputs slightly off the sphere
            debug_assert!(
                (sq.sqrt() - 1.0).abs() < 1e-3 || sq.sqrt() < 1e-6,
                "assignment inputs should have unit columns, got norm {}",
                sq.sqrt()
            );
        }
    }
}

/// Dense assignment: row softmax of `qᵀk / max(|scale|, floor)`.
pub fn compute_assignment_dense(
    tape: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    scale: TensorRef,
    level: usize,
    fine_shape: (usize, usize),
    coarse_shape: (usize, usize),
) -> Result<AssignmentHandle> {
    let n = tape.shape(q)[1];
    let nd = tape.shape(k)[1];
    if n != 4 * nd || fine_shape.0 * fine_shape.1 != n || coarse_shape.0 * coarse_shape.1 != nd {
        return Err(TensorError::ShapeMismatch {
            op: "compute_assignment_dense",
            detail: format!("fine {:?} ({}), coarse {:?} ({})", fine_shape, n, coarse_shape, nd),
        });
    }
    check_unit_columns(tape, q);
    check_unit_columns(tape, k);
    let sim = tape.matmul_tn(q, k)?;
    let weights = tape.softmax_rows(sim, ScaleArg::Var(scale))?;
    Ok(AssignmentHandle { level, fine_shape, coarse_shape, weights, table: None })
}

/// Windowed assignment: similarities only against the 3×3 in-bounds coarse
/// neighborhood of each fine pixel's parent window, softmax over that set.
pub fn compute_assignment_local(
    tape: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    scale: TensorRef,
    level: usize,
    fine_shape: (usize, usize),
    coarse_shape: (usize, usize),
) -> Result<AssignmentHandle> {
    let table = window_table(fine_shape, coarse_shape)?;
    if tape.shape(q)[1] != table.rows || tape.shape(k)[1] != table.src_count {
        return Err(TensorError::ShapeMismatch {
            op: "compute_assignment_local",
            detail: format!(
                "q has {} pixels for grid {:?}, k has {} for {:?}",
                tape.shape(q)[1],
                fine_shape,
                tape.shape(k)[1],
                coarse_shape
            ),
        });
    }
    check_unit_columns(tape, q);
    check_unit_columns(tape, k);
    let sim = tape.gather_dot_cols(q, k, table.clone())?;
    let weights = tape.gather_softmax_rows(sim, ScaleArg::Var(scale), table.clone())?;
    Ok(AssignmentHandle { level, fine_shape, coarse_shape, weights, table: Some(table) })
}

impl AssignmentMatrix {
    pub fn fine_count(&self) -> usize {
        self.fine_shape.0 * self.fine_shape.1
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_shape.0 * self.coarse_shape.1
    }

    /// Weights of row `r` as `(coarse_index, weight)` pairs in candidate
    /// order. Dense rows enumerate every coarse pixel.
    pub fn row_weights(&self, r: usize) -> Vec<(usize, f64)> {
        match &self.layout {
            AssignmentLayout::Dense { weights } => {
                weights.row(r).iter().enumerate().map(|(j, &w)| (j, w)).collect()
            }
            AssignmentLayout::Windowed { weights, table } => table
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, &src)| src >= 0)
                .map(|(j, &src)| (src as usize, weights.at2(r, j)))
                .collect(),
        }
    }

    /// Expands either layout to a dense `[N, N_d]` tensor.
    pub fn to_dense(&self) -> Tensor {
        match &self.layout {
            AssignmentLayout::Dense { weights } => weights.clone(),
            AssignmentLayout::Windowed { .. } => {
                let (n, nd) = (self.fine_count(), self.coarse_count());
                let mut out = Tensor::zeros(vec![n, nd]);
                for r in 0..n {
                    for (src, w) in self.row_weights(r) {
                        out.data_mut()[r * nd + src] = w;
                    }
                }
                out
            }
        }
    }

    /// One-hot rows at each row's maximum weight; ties break to the first
    /// candidate in row order.
    pub fn harden(&self) -> AssignmentMatrix {
        let layout = match &self.layout {
            AssignmentLayout::Dense { weights } => {
                let (n, nd) = (weights.rows(), weights.cols());
                let mut out = Tensor::zeros(vec![n, nd]);
                for r in 0..n {
                    let row = weights.row(r);
                    let best = argmax(row);
                    out.data_mut()[r * nd + best] = 1.0;
                }
                AssignmentLayout::Dense { weights: out }
            }
            AssignmentLayout::Windowed { weights, table } => {
                let (n, slots) = (weights.rows(), weights.cols());
                let mut out = Tensor::zeros(vec![n, slots]);
                for r in 0..n {
                    let valid = table.row(r);
                    let mut best = usize::MAX;
                    let mut best_w = f64::NEG_INFINITY;
                    for (j, &src) in valid.iter().enumerate() {
                        if src >= 0 && weights.at2(r, j) > best_w {
                            best_w = weights.at2(r, j);
                            best = j;
                        }
                    }
                    out.data_mut()[r * slots + best] = 1.0;
                }
                AssignmentLayout::Windowed { weights: out, table: table.clone() }
            }
        };
        AssignmentMatrix { layout, ..self.clone() }
    }

    /// Index of each row's maximum-weight coarse pixel.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.fine_count())
            .map(|r| {
                let rw = self.row_weights(r);
                let mut best = rw[0];
                for &cand in &rw[1..] {
                    if cand.1 > best.1 {
                        best = cand;
                    }
                }
                best.0
            })
            .collect()
    }

    /// Mean Shannon entropy over rows, in nats; `0·ln 0` counts as zero.
    pub fn entropy(&self) -> f64 {
        let n = self.fine_count();
        let mut total = 0.0;
        for r in 0..n {
            for (_, w) in self.row_weights(r) {
                if w > 0.0 {
                    total -= w * w.ln();
                }
            }
        }
        total / n as f64
    }

    /// Max deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.fine_count())
            .map(|r| (self.row_weights(r).iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
