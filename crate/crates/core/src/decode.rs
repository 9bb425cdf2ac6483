//! Mask decoding by chained assignment products.
//!
//! A mask stack holds per-pixel values on one grid level; multiplying it by
//! the level's assignment matrix copies (softly) each coarse prototype's row
//! to the fine pixels assigned to it. Folding from the coarsest level to the
//! finest recovers full-resolution masks without any learned upsampler. The
//! residual stem stride, which has no clustering module, is bridged by
//! nearest-neighbor replication.

use std::sync::Arc;

use thiserror::Error;

use crate::clustering::{AssignmentHandle, AssignmentLayout, AssignmentMatrix};
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("level mismatch: assignment has {coarse} coarse pixels, mask stack has {mask}")]
    LevelMismatch { coarse: usize, mask: usize },
    #[error("assignment levels are not consecutive: {0} then {1}")]
    NonConsecutive(usize, usize),
    #[error("image grid {image:?} not divisible by mask grid {grid:?}")]
    NonDivisible { grid: (usize, usize), image: (usize, usize) },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What the columns of a mask stack mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Semantics {
    /// Independent per-mask probabilities in [0,1] (sigmoid outputs).
    MaskProbs,
    /// Rows on the simplex over classes (softmax outputs).
    ClassProbs,
}

/// Per-pixel values on one grid level: `values[pixel, mask-or-class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub grid: (usize, usize),
    pub semantics: Semantics,
    pub values: Tensor,
}

impl MaskStack {
    pub fn new(grid: (usize, usize), semantics: Semantics, values: Tensor) -> Result<Self, DecodeError> {
        if values.shape().len() != 2 || values.shape()[0] != grid.0 * grid.1 {
            return Err(DecodeError::LevelMismatch {
                coarse: grid.0 * grid.1,
                mask: values.shape().first().copied().unwrap_or(0),
            });
        }
        Ok(MaskStack { grid, semantics, values })
    }

    pub fn pixel_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Max deviation of any row sum from 1 (meaningful for class stacks).
    pub fn max_row_sum_error(&self) -> f64 {
        let cols = self.values.cols();
        (0..self.values.rows())
            .map(|r| {
                (self.values.data()[r * cols..(r + 1) * cols].iter().sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// One decode step: `M_fine = A · M_coarse`, using the sparse gather form
/// for windowed assignments.
pub fn decode_step(a: &AssignmentMatrix, m: &MaskStack) -> Result<MaskStack, DecodeError> {
    if a.coarse_count() != m.pixel_count() {
        return Err(DecodeError::LevelMismatch { coarse: a.coarse_count(), mask: m.pixel_count() });
    }
    let cols = m.values.cols();
    let n = a.fine_count();
    let mut out = Tensor::zeros(vec![n, cols]);
    match &a.layout {
        AssignmentLayout::Dense { weights } => {
            crate::tensor::matmul_into(weights, &m.values, &mut out);
        }
        AssignmentLayout::Windowed { weights, table } => {
            let md = m.values.data();
            let od = out.data_mut();
            for r in 0..n {
                for (j, &src) in table.row(r).iter().enumerate() {
                    if src < 0 {
                        continue;
                    }
                    let w = weights.at2(r, j);
                    if w == 0.0 {
                        continue;
                    }
                    let mrow = &md[src as usize * cols..(src as usize + 1) * cols];
                    let orow = &mut od[r * cols..(r + 1) * cols];
                    for (o, &mv) in orow.iter_mut().zip(mrow) {
                        *o += w * mv;
                    }
                }
            }
        }
    }
    MaskStack::new(a.fine_shape, m.semantics, out)
}

fn check_consecutive(assignments: &[AssignmentMatrix]) -> Result<(), DecodeError> {
    for pair in assignments.windows(2) {
        if pair[0].coarse_shape != pair[1].fine_shape {
            return Err(DecodeError::NonConsecutive(pair[0].level, pair[1].level));
        }
    }
    Ok(())
}

/// Left fold of [`decode_step`] from the coarsest assignment to the finest.
/// `assignments` are ordered fine→coarse; an empty list returns `m` as-is.
pub fn decode_full(assignments: &[AssignmentMatrix], m: &MaskStack) -> Result<MaskStack, DecodeError> {
    check_consecutive(assignments)?;
    let mut cur = m.clone();
    for a in assignments.iter().rev() {
        cur = decode_step(a, &cur)?;
    }
    Ok(cur)
}

/// [`decode_full`] after hardening every assignment: each fine pixel copies
/// exactly its ancestor prototype's row.
pub fn hard_decode(assignments: &[AssignmentMatrix], m: &MaskStack) -> Result<MaskStack, DecodeError> {
    let hardened: Vec<AssignmentMatrix> = assignments.iter().map(|a| a.harden()).collect();
    decode_full(&hardened, m)
}

/// Nearest-neighbor replication of the finest hooked grid up to the image
/// grid (the stem factor carries no clustering module).
pub fn upsample_to_image(m: &MaskStack, image: (usize, usize)) -> Result<MaskStack, DecodeError> {
    let (gh, gw) = m.grid;
    if gh == 0 || gw == 0 || image.0 % gh != 0 || image.1 % gw != 0 {
        return Err(DecodeError::NonDivisible { grid: m.grid, image });
    }
    let (fy, fx) = (image.0 / gh, image.1 / gw);
    if fy == 1 && fx == 1 {
        return Ok(m.clone());
    }
    let cols = m.values.cols();
    let mut out = Tensor::zeros(vec![image.0 * image.1, cols]);
    for y in 0..image.0 {
        for x in 0..image.1 {
            let src = ((y / fy) * gw + x / fx) * cols;
            let dst = (y * image.1 + x) * cols;
            out.data_mut()[dst..dst + cols]
                .copy_from_slice(&m.values.data()[src..src + cols]);
        }
    }
    MaskStack::new(image, m.semantics, out)
}

/// Full-resolution cluster ids from the hardened assignment chain up to and
/// including `depth` levels (1-based; `depth == assignments.len()` uses the
/// whole chain). Ids index prototypes of the grid below the last level used.
pub fn cluster_partition(
    assignments: &[AssignmentMatrix],
    depth: usize,
    image: (usize, usize),
) -> Result<Vec<u32>, DecodeError> {
    assert!(depth >= 1 && depth <= assignments.len());
    let used = &assignments[..depth];
    check_consecutive(used)?;
    // walk coarse→fine composing hardened argmax maps
    let mut ids: Vec<u32> = (0..used[depth - 1].coarse_count() as u32).collect();
    for a in used.iter().rev() {
        let arg = a.argmax_rows();
        ids = arg.iter().map(|&src| ids[src]).collect();
    }
    let (gh, gw) = used[0].fine_shape;
    if image.0 % gh != 0 || image.1 % gw != 0 {
        return Err(DecodeError::NonDivisible { grid: (gh, gw), image });
    }
    let (fy, fx) = (image.0 / gh, image.1 / gw);
    let mut out = Vec::with_capacity(image.0 * image.1);
    for y in 0..image.0 {
        for x in 0..image.1 {
            out.push(ids[(y / fy) * gw + x / fx]);
        }
    }
    Ok(out)
}

/// Tape-side decode chain used during training; assignments ordered
/// fine→coarse, folded coarse→fine exactly like [`decode_full`].
pub fn decode_full_tape(
    tape: &mut Tape,
    assignments: &[AssignmentHandle],
    m: TensorRef,
) -> Result<TensorRef, DecodeError> {
    let mut cur = m;
    for a in assignments.iter().rev() {
        let coarse = a.coarse_shape.0 * a.coarse_shape.1;
        let rows = tape.shape(cur)[0];
        if coarse != rows {
            return Err(DecodeError::LevelMismatch { coarse, mask: rows });
        }
        cur = match &a.table {
            Some(table) => tape.gather_mix_rows(a.weights, cur, Arc::clone(table))?,
            None => tape.matmul(a.weights, cur)?,
        };
    }
    Ok(cur)
}
