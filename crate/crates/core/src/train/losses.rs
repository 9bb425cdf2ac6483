//! Training losses for both heads, on tape and as detached scalars for the
//! matching cost.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result as TensorResult, Tape, Tensor, TensorRef};
use crate::train::hungarian::MatchResult;

/// Loss term weights; the mask loss is `λ_ce·BCE + λ_dice·Dice`, the total
/// adds `λ_cls·CE + λ_reg·Σ|s|`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    /// Cross-entropy weight of queries assigned to the no-object class.
    pub no_object_weight: f64,
    pub dice_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            lambda_cls: 2.0,
            lambda_reg: 0.1,
            no_object_weight: 0.1,
            dice_smoothing: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.lambda_ce,
            self.lambda_dice,
            self.lambda_cls,
            self.lambda_reg,
            self.no_object_weight,
            self.dice_smoothing,
        ];
        if all.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err("loss weights must be non-negative and finite".into());
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over pixels and matched masks.
pub fn bce_mask_loss(tape: &mut Tape, pred: TensorRef, target: &Tensor) -> TensorResult<TensorRef> {
    tape.bce_mean(pred, target)
}

/// Mean soft dice loss over matched masks.
pub fn dice_loss(
    tape: &mut Tape,
    pred: TensorRef,
    target: &Tensor,
    smoothing: f64,
) -> TensorResult<TensorRef> {
    tape.dice_mean(pred, target, smoothing)
}

/// Cross-entropy of every query's class row: matched queries against their
/// segment's class with weight 1, unmatched against no-object with
/// `no_object_weight`; the result is averaged over queries.
pub fn classification_loss(
    tape: &mut Tape,
    class_probs: TensorRef,
    matching: &MatchResult,
    gt_classes: &[usize],
    no_object_weight: f64,
) -> TensorResult<TensorRef> {
    let num_queries = tape.shape(class_probs)[0];
    let no_object = tape.shape(class_probs)[1] - 1;
    let mut targets = vec![no_object; num_queries];
    let mut weights = vec![no_object_weight / num_queries as f64; num_queries];
    for &(q, g) in &matching.pairs {
        targets[q] = gt_classes[g];
        weights[q] = 1.0 / num_queries as f64;
    }
    tape.nll_rows(class_probs, &targets, &weights)
}

/// `Σ_i |s_i|` over the per-level scale parameters.
pub fn scale_regularizer(tape: &mut Tape, scales: &[TensorRef]) -> TensorResult<TensorRef> {
    let mut total: Option<TensorRef> = None;
    for &s in scales {
        let a = tape.sum_abs(s)?;
        total = Some(match total {
            Some(t) => tape.add(t, a)?,
            None => a,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(&Tensor::scalar(0.0))),
    }
}

// ---- detached scalar twins used to build the matching cost ----

/// Mean BCE between one predicted mask column and a binary target.
pub fn bce_scalar(pred: &[f64], target: &[f64]) -> f64 {
    let floor = crate::tensor::PROB_FLOOR;
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let pc = p.clamp(floor, 1.0 - floor);
        acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    acc / pred.len() as f64
}

/// Dice loss between one predicted mask column and a binary target.
pub fn dice_scalar(pred: &[f64], target: &[f64], smoothing: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    1.0 - (2.0 * inter + smoothing) / (sp + st + smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::hungarian::hungarian_match;

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        // pred == target at {eps, 1-eps}: loss ≈ −ln(1−eps)
        let eps = 1e-3;
        let t = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let p = tape.constant(&Tensor::new(vec![2, 1], vec![eps, 1.0 - eps]).unwrap());
        let loss = bce_mask_loss(&mut tape, p, &t).unwrap();
        assert!((tape.data(loss)[0] - (-(1.0f64 - eps).ln())).abs() < 1e-12);

        // pred = 0.5 everywhere -> ln 2
        let p = tape.constant(&Tensor::full(vec![4, 1], 0.5).unwrap());
        let t = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let loss = bce_mask_loss(&mut tape, p, &t).unwrap();
        assert!((tape.data(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let p = Tensor::from_fn(vec![6, 2], |_| rng.random_range(0.01..0.99)).unwrap();
        let t = Tensor::from_fn(vec![6, 2], |_| if rng.random_range(0.0..1.0) > 0.5 { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::new();
        let pr = tape.constant(&p);
        let loss = bce_mask_loss(&mut tape, pr, &t).unwrap();
        // column-wise scalar path, averaged
        let n = 6;
        let want = (bce_scalar(
            &(0..n).map(|r| p.at2(r, 0)).collect::<Vec<_>>(),
            &(0..n).map(|r| t.at2(r, 0)).collect::<Vec<_>>(),
        ) + bce_scalar(
            &(0..n).map(|r| p.at2(r, 1)).collect::<Vec<_>>(),
            &(0..n).map(|r| t.at2(r, 1)).collect::<Vec<_>>(),
        )) / 2.0;
        assert!((tape.data(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let mut tape = Tape::new();
        // perfect overlap, tiny smoothing: loss ~ 0
        let t = Tensor::new(vec![4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = tape.constant(&t.clone());
        let loss = dice_loss(&mut tape, p, &t, 1e-9).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-8);

        // disjoint -> 1 (smoothing -> 0)
        let p = tape.constant(&Tensor::new(vec![4, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let t = Tensor::new(vec![4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = dice_loss(&mut tape, p, &t, 1e-9).unwrap();
        assert!((tape.data(loss)[0] - 1.0).abs() < 1e-8);

        // half overlap on a 2x2 mask: 1 − 2·1/(2+2) = 0.5
        let p = tape.constant(&Tensor::new(vec![4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let t = Tensor::new(vec![4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = dice_loss(&mut tape, p, &t, 1e-12).unwrap();
        assert!((tape.data(loss)[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn classification_loss_examples() {
        // perfect one-hot rows on matches: ~0
        let mut tape = Tape::new();
        let p = tape.constant(
            &Tensor::new(vec![2, 3], vec![1.0 - 1e-12, 1e-12, 0.0, 0.0, 1.0 - 1e-12, 1e-12]).unwrap(),
        );
        let m = MatchResult { pairs: vec![(0, 0), (1, 1)], unmatched: vec![] };
        let loss = classification_loss(&mut tape, p, &m, &[0, 1], 0.1).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-9);

        // uniform rows over K+1=4: mean loss ln 4
        let p = tape.constant(&Tensor::full(vec![3, 4], 0.25).unwrap());
        let m = MatchResult { pairs: vec![(0, 0), (1, 1), (2, 2)], unmatched: vec![] };
        let loss = classification_loss(&mut tape, p, &m, &[0, 1, 2], 0.1).unwrap();
        assert!((tape.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_weights_no_object() {
        // one matched (class 0), one unmatched: weights 1 and w∅, averaged
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.2, 0.1, 0.2, 0.7]).unwrap());
        let m = MatchResult { pairs: vec![(0, 0)], unmatched: vec![1] };
        let w = 0.1;
        let loss = classification_loss(&mut tape, p, &m, &[0], w).unwrap();
        let want = (-(0.5f64).ln() + w * -(0.7f64).ln()) / 2.0;
        assert!((tape.data(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn scale_regularizer_examples() {
        let mut tape = Tape::new();
        // zeros -> 0
        let s0 = tape.leaf(&Tensor::scalar(0.0));
        let r = scale_regularizer(&mut tape, &[s0]).unwrap();
        assert_eq!(tape.data(r)[0], 0.0);

        // [0.1, -0.2, 0.3] -> 0.6
        let a = tape.leaf(&Tensor::scalar(0.1));
        let b = tape.leaf(&Tensor::scalar(-0.2));
        let c = tape.leaf(&Tensor::scalar(0.3));
        let r = scale_regularizer(&mut tape, &[a, b, c]).unwrap();
        assert!((tape.data(r)[0] - 0.6).abs() < 1e-15);

        // gradient at s=0.1 is +1 (checked against central differences)
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[-1.0]);
        let fd = crate::tensor::finite_difference(
            &mut |x: &Tensor| x.data()[0].abs(),
            &Tensor::scalar(0.1),
            1e-6,
        )
        .unwrap();
        assert!((fd.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cost_assembly_pairs_with_matching() {
        // two queries, one obviously cheaper per segment: matching follows cost
        let cost = Tensor::new(vec![2, 2], vec![0.1, 3.0, 2.0, 0.2]).unwrap();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }
}
