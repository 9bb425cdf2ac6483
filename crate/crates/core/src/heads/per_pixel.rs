//! Per-pixel linear classification decoded through the assignment chain.
//!
//! A bias-free linear classifier scores the coarsest features against one
//! weight column per class; the row softmax of those scores is already the
//! attention form with the classifier norm acting as the inverse scale, so
//! no separate temperature exists here.

use crate::backbone::FeaturePyramid;
use crate::decode::decode_full_tape;
use crate::heads::{HeadConfig, HeadError, HeadOutput, SegmentationHead};
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::tensor::{ScaleArg, Tape};

pub struct PerPixelHead {
    classifier: ParamId,
}

impl PerPixelHead {
    pub fn build(cfg: &HeadConfig, backbone_channels: usize, store: &mut ParamStore) -> Self {
        PerPixelHead {
            classifier: store.register_uniform(
                "head.per_pixel.w",
                vec![backbone_channels, cfg.num_classes],
                backbone_channels,
            ),
        }
    }
}

impl SegmentationHead for PerPixelHead {
    fn name(&self) -> &'static str {
        "per-pixel"
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        pyramid: &FeaturePyramid,
        image: (usize, usize),
    ) -> Result<HeadOutput, HeadError> {
        let logits = tape.matmul_tn(pyramid.final_features, binding.get(self.classifier))?;
        let probs = tape.softmax_rows(logits, ScaleArg::Const(1.0))?;
        let assignments: Vec<_> = pyramid.levels.iter().map(|l| l.assignment.clone()).collect();
        let decoded = decode_full_tape(tape, &assignments, probs)?;
        let finest = assignments.first().map(|a| a.fine_shape).unwrap_or(pyramid.final_grid);
        let full = tape.upsample_rows(decoded, finest, image)?;
        Ok(HeadOutput::PerPixel { class_probs: full, coarse_probs: probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn zero_weights_give_uniform_classes() {
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::new(vec![2, 3], vec![0.4, -1.0, 2.0, 0.3, 0.0, 1.0]).unwrap());
        let w = tape.constant(&Tensor::zeros(vec![2, 4]));
        let logits = tape.matmul_tn(f, w).unwrap();
        let probs = tape.softmax_rows(logits, ScaleArg::Const(1.0)).unwrap();
        for &v in tape.data(probs) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_class_dominates_as_weight_norm_grows() {
        // f equals one classifier column; scaling w sharpens toward it
        let f_col = [0.6, 0.8];
        let prob_of_class0 = |norm: f64| {
            let mut tape = Tape::new();
            let f = tape.constant(&Tensor::new(vec![2, 1], f_col.to_vec()).unwrap());
            // orthonormal columns: class0 = f direction, class1 = perpendicular
            let w = tape
                .constant(&Tensor::new(vec![2, 2], vec![0.6 * norm, -0.8 * norm, 0.8 * norm, 0.6 * norm]).unwrap());
            let logits = tape.matmul_tn(f, w).unwrap();
            let probs = tape.softmax_rows(logits, ScaleArg::Const(1.0)).unwrap();
            tape.data(probs)[0]
        };
        let p1 = prob_of_class0(1.0);
        let p10 = prob_of_class0(10.0);
        let p100 = prob_of_class0(100.0);
        assert!(p1 < p10 && p10 < p100);
        assert!((p100 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_gram_softmax_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        let (c, n, k) = (4, 6, 3);
        let f = Tensor::from_fn(vec![c, n], |_| rng.random_range(-1.0..1.0)).unwrap();
        let w = Tensor::from_fn(vec![c, k], |_| rng.random_range(-1.0..1.0)).unwrap();
        let mut tape = Tape::new();
        let fr = tape.constant(&f);
        let wr = tape.constant(&w);
        let logits = tape.matmul_tn(fr, wr).unwrap();
        let probs = tape.softmax_rows(logits, ScaleArg::Const(1.0)).unwrap();
        for r in 0..n {
            let raw: Vec<f64> = (0..k)
                .map(|j| (0..c).map(|ci| f.at2(ci, r) * w.at2(ci, j)).sum::<f64>())
                .collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = raw.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..k {
                assert!((tape.data(probs)[r * k + j] - exps[j] / denom).abs() < 1e-12);
            }
            // rows sum to 1
            let sum: f64 = (0..k).map(|j| tape.data(probs)[r * k + j]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
