//! Central-difference gradient oracle.
//!
//! Deliberately knows nothing about the tape: it evaluates a black-box
//! scalar function twice per coordinate, so it can certify any gradient the
//! tape produces.

use super::{Result, Tensor, TensorError};

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h` per coordinate.
pub fn finite_difference(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::Domain {
            op: "finite_difference",
            detail: format!("step must be positive, got {}", h),
        });
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a − b| ≤ tol · max(|a|, |b|)` with an absolute floor for near-zero
/// pairs, the comparison used by every gradient check in this crate.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let diff = (a - b).abs();
    diff <= tol * a.abs().max(b.abs()) || diff <= 1e-8
}
