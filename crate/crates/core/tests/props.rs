//! Property tests for the spec-level invariants that hold for *any* input.

use hierseg::clustering::{compute_assignment_dense, compute_assignment_local};
use hierseg::data::netpbm::{encode_pgm, encode_ppm, parse_pgm, parse_ppm, LabelMap, RgbImage};
use hierseg::decode::{decode_full, MaskStack, Semantics};
use hierseg::metrics::undersegmentation_error;
use hierseg::metrics::UeVariant;
use hierseg::tensor::{ScaleArg, Tape, Tensor};
use proptest::prelude::*;

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0..50.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in finite_vals(4 * 6),
        scale in prop_oneof![Just(1e-6), Just(1e-3), Just(1.0), Just(1e3)],
        shift in -20.0..20.0f64,
    ) {
        let x = Tensor::new(vec![4, 6], vals.clone()).unwrap();
        let mut tape = Tape::new();
        let xr = tape.constant(&x);
        let y = tape.softmax_rows(xr, ScaleArg::Const(scale)).unwrap();
        for r in 0..4 {
            let sum: f64 = tape.data(y)[r * 6..(r + 1) * 6].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
        let shifted = Tensor::new(vec![4, 6], vals.iter().map(|v| v + shift).collect()).unwrap();
        let sr = tape.constant(&shifted);
        let ys = tape.softmax_rows(sr, ScaleArg::Const(scale)).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(ys)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn assignments_are_row_stochastic(seed in 0u64..1000, scale in 0.01..2.0f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut unit = |c: usize, n: usize| {
            let mut t = Tensor::zeros(vec![c, n]);
            for j in 0..n {
                let col: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                for i in 0..c {
                    t.data_mut()[i * n + j] = col[i] / norm;
                }
            }
            t
        };
        let q = unit(6, 24);
        let k = unit(6, 6);
        let mut tape = Tape::new();
        let qr = tape.constant(&q);
        let kr = tape.constant(&k);
        let sr = tape.constant(&Tensor::scalar(scale));
        let dense = compute_assignment_dense(&mut tape, qr, kr, sr, 0, (4, 6), (2, 3)).unwrap();
        prop_assert!(dense.detach(&tape).max_row_sum_error() <= 1e-6);
        let local = compute_assignment_local(&mut tape, qr, kr, sr, 0, (4, 6), (2, 3)).unwrap();
        prop_assert!(local.detach(&tape).max_row_sum_error() <= 1e-6);
    }

    #[test]
    fn decode_keeps_mask_probs_in_unit_interval(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        use hierseg::clustering::{AssignmentLayout, AssignmentMatrix};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut w = Tensor::zeros(vec![16, 4]);
        for r in 0..16 {
            let row: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0) + 1e-6).collect();
            let s: f64 = row.iter().sum();
            for j in 0..4 {
                w.data_mut()[r * 4 + j] = row[j] / s;
            }
        }
        let a = AssignmentMatrix {
            level: 0,
            fine_shape: (4, 4),
            coarse_shape: (2, 2),
            layout: AssignmentLayout::Dense { weights: w },
        };
        let m = Tensor::from_fn(vec![4, 3], |_| rng.random_range(0.0..1.0)).unwrap();
        let stack = MaskStack::new((2, 2), Semantics::MaskProbs, m).unwrap();
        let out = decode_full(&[a], &stack).unwrap();
        for &v in out.values.data() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn netpbm_roundtrips_bit_exactly(
        w in 1usize..12,
        h in 1usize..12,
        seed in 0u64..10_000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let img = RgbImage {
            width: w,
            height: h,
            pixels: (0..w * h * 3).map(|_| rng.random_range(0..=255u8)).collect(),
        };
        let back = parse_ppm(&encode_ppm(&img), "prop").unwrap();
        prop_assert_eq!(back, img);

        let wide = rng.random_range(0.0..1.0) > 0.5;
        let max = if wide { 40_000 } else { 255 };
        let map = LabelMap {
            width: w,
            height: h,
            labels: (0..w * h).map(|_| rng.random_range(0..=max) as u16).collect(),
        };
        let back = parse_pgm(&encode_pgm(&map), "prop").unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn ue_zero_iff_refinement(seed in 0u64..500) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let n = 36;
        let gt: Vec<u32> = (0..n).map(|_| rng.random_range(0..3u32)).collect();
        // refinement: split each gt segment into two arbitrary subclusters
        let partition: Vec<u32> =
            gt.iter().map(|&g| 2 * g + rng.random_range(0..2u32)).collect();
        let (ue, mask) = undersegmentation_error(&partition, &gt, UeVariant::Min);
        prop_assert_eq!(ue, 0.0);
        prop_assert!(mask.iter().all(|&m| !m));
    }
}

#[test]
fn row_stochastic_chain_products_associate() {
    // (A·B)·M == A·(B·M) within 1e-10 on random row-stochastic chains
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
    let stoch = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha12Rng| {
        let mut t = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            let row: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for j in 0..cols {
                t.data_mut()[r * cols + j] = row[j] / s;
            }
        }
        t
    };
    for _ in 0..20 {
        let a = stoch(16, 8, &mut rng);
        let b = stoch(8, 4, &mut rng);
        let m = stoch(4, 5, &mut rng);
        let mut tape = Tape::new();
        let ar = tape.constant(&a);
        let br = tape.constant(&b);
        let mr = tape.constant(&m);
        let ab = tape.matmul(ar, br).unwrap();
        let left = tape.matmul(ab, mr).unwrap();
        let bm = tape.matmul(br, mr).unwrap();
        let right = tape.matmul(ar, bm).unwrap();
        for (x, y) in tape.data(left).iter().zip(tape.data(right)) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}
