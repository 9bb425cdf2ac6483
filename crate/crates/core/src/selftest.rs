//! Fast oracle/invariant suite behind the `selftest` subcommand: a reduced
//! version of the full test suites, runnable from a release binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::clustering::{compute_assignment_dense, compute_assignment_local, window_table};
use crate::data::netpbm::{encode_ppm, parse_ppm, RgbImage};
use crate::decode::{decode_full, MaskStack, Semantics};
use crate::metrics::{miou, panoptic_quality, undersegmentation_error, SegmentMap, UeVariant};
use crate::tensor::{finite_difference, rel_close, ScaleArg, Tape, Tensor};
use crate::train::hungarian::{brute_force_min_cost, hungarian_match};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn unit_cols(c: usize, n: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let mut t = Tensor::zeros(vec![c, n]);
    for j in 0..n {
        let col: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        for i in 0..c {
            t.data_mut()[i * n + j] = col[i] / norm;
        }
    }
    t
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("softmax row-stochastic + shift invariance", || {
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            for scale in [1e-6, 1e-3, 1.0, 1e3] {
                let x = Tensor::from_fn(vec![8, 6], |_| rng.random_range(-5.0..5.0)).unwrap();
                let mut tape = Tape::new();
                let xr = tape.constant(&x);
                let y = tape.softmax_rows(xr, ScaleArg::Const(scale)).unwrap();
                for r in 0..8 {
                    let sum: f64 = tape.data(y)[r * 6..(r + 1) * 6].iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(format!("row sum {sum} at scale {scale}"));
                    }
                }
                let shifted = Tensor::from_fn(vec![8, 6], |i| x.data()[i] + 3.5).unwrap();
                let sr = tape.constant(&shifted);
                let ys = tape.softmax_rows(sr, ScaleArg::Const(scale)).unwrap();
                let max_diff = tape
                    .data(y)
                    .iter()
                    .zip(tape.data(ys))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if max_diff > 1e-12 {
                    return Err(format!("shift changed softmax by {max_diff}"));
                }
            }
            Ok("4 scales".into())
        }),
        check("windowed attention equals masked dense", || {
            let mut rng = ChaCha12Rng::seed_from_u64(2);
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let (ch, cw) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
                let (fh, fw) = (2 * ch, 2 * cw);
                let q = unit_cols(8, fh * fw, &mut rng);
                let k = unit_cols(8, ch * cw, &mut rng);
                let scale = rng.random_range(0.05..1.0);
                let mut tape = Tape::new();
                let qr = tape.constant(&q);
                let kr = tape.constant(&k);
                let sr = tape.constant(&Tensor::scalar(scale));
                let local = compute_assignment_local(&mut tape, qr, kr, sr, 0, (fh, fw), (ch, cw))
                    .map_err(|e| e.to_string())?
                    .detach(&tape)
                    .to_dense();
                let dense = masked_dense(&q, &k, scale, (fh, fw), (ch, cw));
                let diff = local
                    .data()
                    .iter()
                    .zip(dense.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(diff);
                if diff > 1e-10 {
                    return Err(format!("max abs diff {diff}"));
                }
            }
            Ok(format!("50 instances, worst diff {worst:.2e}"))
        }),
        check("hard limit recovers argmax clustering", || {
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            let mut done = 0;
            while done < 30 {
                let q = unit_cols(6, 16, &mut rng);
                let k = unit_cols(6, 4, &mut rng);
                // the limit statement assumes unique row maxima: resample
                // instances whose top-2 similarity gap is degenerate
                if min_top2_gap(&q, &k) < 0.02 {
                    continue;
                }
                done += 1;
                let mut tape = Tape::new();
                let qr = tape.constant(&q);
                let kr = tape.constant(&k);
                let sr = tape.constant(&Tensor::scalar(1e-3));
                let a = compute_assignment_dense(&mut tape, qr, kr, sr, 0, (4, 4), (2, 2))
                    .map_err(|e| e.to_string())?
                    .detach(&tape);
                if a.entropy() > 0.01 {
                    return Err(format!("entropy {} at scale 1e-3", a.entropy()));
                }
                let hard = a.harden();
                for r in 0..16 {
                    let sims: Vec<f64> = (0..4)
                        .map(|j| (0..6).map(|c| q.at2(c, r) * k.at2(c, j)).sum())
                        .collect();
                    let mut best = 0;
                    for j in 1..4 {
                        if sims[j] > sims[best] {
                            best = j;
                        }
                    }
                    let row = hard.row_weights(r);
                    if (row[best].1 - 1.0).abs() > 1e-12 {
                        return Err(format!("row {r} hardened away from argmax"));
                    }
                }
            }
            Ok("30 instances".into())
        }),
        check("assignment gradients match finite differences", || {
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let q = unit_cols(4, 8, &mut rng);
            let k = unit_cols(4, 2, &mut rng);
            let s = 0.4;
            // d(weighted sum of A)/d(scale) via tape vs oracle
            let weights: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
            let f = |scale: f64| -> f64 {
                let mut tape = Tape::new();
                let qr = tape.constant(&q);
                let kr = tape.constant(&k);
                let sr = tape.constant(&Tensor::scalar(scale));
                let a = compute_assignment_dense(&mut tape, qr, kr, sr, 0, (2, 4), (1, 2))
                    .unwrap();
                tape.data(a.weights).iter().zip(&weights).map(|(v, w)| v * w).sum()
            };
            let mut tape = Tape::new();
            let qr = tape.constant(&q);
            let kr = tape.constant(&k);
            let sr = tape.leaf(&Tensor::scalar(s));
            let a = compute_assignment_dense(&mut tape, qr, kr, sr, 0, (2, 4), (1, 2))
                .map_err(|e| e.to_string())?;
            let wt = tape.constant(&Tensor::new(vec![2, 8], weights.clone()).unwrap()).to_owned();
            let _ = wt;
            let flat = tape.reshape(a.weights, vec![16]).unwrap();
            let wr = tape.constant(&Tensor::new(vec![16], weights.clone()).unwrap());
            let prod = tape.mul(flat, wr).unwrap();
            let loss = tape.sum(prod).unwrap();
            tape.backward(loss).unwrap();
            let analytic = tape.grad(sr).unwrap()[0];
            let numeric =
                finite_difference(&mut |x: &Tensor| f(x.data()[0]), &Tensor::scalar(s), 1e-5)
                    .map_err(|e| e.to_string())?
                    .data()[0];
            if !rel_close(analytic, numeric, 1e-5) {
                return Err(format!("scale grad {analytic} vs fd {numeric}"));
            }
            Ok(format!("d/ds {analytic:.6} == fd {numeric:.6}"))
        }),
        check("matcher equals exhaustive search", || {
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            for trial in 0..200 {
                let nq = rng.random_range(1..=5usize);
                let ng = rng.random_range(1..=5usize);
                let cost = Tensor::from_fn(vec![nq, ng], |_| rng.random_range(0.0..1.0)).unwrap();
                let m = hungarian_match(&cost).map_err(|e| e.to_string())?;
                if m.total_cost(&cost) != brute_force_min_cost(&cost) {
                    return Err(format!("trial {trial} suboptimal"));
                }
            }
            Ok("200 trials".into())
        }),
        check("metric fixtures", || {
            // UE: straddling middle cluster on a 4x4 -> exactly 0.5
            let gt: Vec<u32> = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
            let partition: Vec<u32> =
                (0..16).map(|i| match i % 4 { 0 => 0, 1 | 2 => 1, _ => 2 }).collect();
            let (ue, _) = undersegmentation_error(&partition, &gt, UeVariant::Min);
            if ue != 0.5 {
                return Err(format!("UE {ue} != 0.5"));
            }
            // mIoU: half-overlapping squares -> 1/3
            let mut gt = vec![0u32; 16];
            let mut pred = vec![0u32; 16];
            for x in 0..4 {
                gt[x] = 1;
                gt[4 + x] = 1;
                pred[4 + x] = 1;
                pred[8 + x] = 1;
            }
            let r = miou(&pred, &gt, 2);
            if (r.per_class[&1] - 1.0 / 3.0).abs() > 1e-12 {
                return Err(format!("IoU {} != 1/3", r.per_class[&1]));
            }
            // PQ: one TP at IoU 0.6 plus one FP -> 0.4
            let mut gt_inst = vec![9u32; 16];
            let mut pred_inst = vec![9u32; 16];
            for i in 0..10 {
                gt_inst[i] = 0;
            }
            for i in 0..6 {
                pred_inst[i] = 0;
            }
            for i in 12..16 {
                pred_inst[i] = 1;
            }
            let gt_map = SegmentMap {
                instances: gt_inst,
                classes: [(0u32, 0u32)].into_iter().collect(),
                void_instance: Some(9),
            };
            let pred_map = SegmentMap {
                instances: pred_inst,
                classes: [(0u32, 0u32), (1u32, 0u32)].into_iter().collect(),
                void_instance: Some(9),
            };
            let pq = panoptic_quality(&pred_map, &gt_map);
            if (pq.pq - 0.4).abs() > 1e-12 {
                return Err(format!("PQ {} != 0.4", pq.pq));
            }
            Ok("UE/mIoU/PQ hand values".into())
        }),
        check("netpbm round-trip and fuzz", || {
            let mut rng = ChaCha12Rng::seed_from_u64(6);
            let img = RgbImage {
                width: 5,
                height: 3,
                pixels: (0..45).map(|_| rng.random_range(0..=255u8)).collect(),
            };
            let encoded = encode_ppm(&img);
            let back = parse_ppm(&encoded, "selftest").map_err(|e| e.to_string())?;
            if back != img {
                return Err("round-trip mismatch".into());
            }
            for _ in 0..100 {
                let mut mutated = encoded.clone();
                let i = rng.random_range(0..mutated.len().min(12));
                mutated[i] = rng.random_range(0..=255u8);
                let _ = parse_ppm(&mutated, "fuzz"); // must not panic
            }
            Ok("100 fuzzed headers".into())
        }),
        check("decode conserves row-stochastic stacks", || {
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            for _ in 0..20 {
                let chain = random_chain(&mut rng);
                let m = stochastic_stack(&mut rng, 4);
                let out = decode_full(&chain, &m).map_err(|e| e.to_string())?;
                if out.max_row_sum_error() > 1e-6 {
                    return Err(format!("row sum error {}", out.max_row_sum_error()));
                }
            }
            Ok("20 chains".into())
        }),
    ]
}

/// Smallest gap between each row's best and second-best similarity.
pub fn min_top2_gap(q: &Tensor, k: &Tensor) -> f64 {
    let (c, n) = (q.shape()[0], q.shape()[1]);
    let nd = k.shape()[1];
    let mut min_gap = f64::INFINITY;
    for r in 0..n {
        let mut sims: Vec<f64> = (0..nd)
            .map(|j| (0..c).map(|ci| q.at2(ci, r) * k.at2(ci, j)).sum())
            .collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sims.len() > 1 {
            min_gap = min_gap.min(sims[0] - sims[1]);
        }
    }
    min_gap
}

fn masked_dense(
    q: &Tensor,
    k: &Tensor,
    scale: f64,
    fine: (usize, usize),
    coarse: (usize, usize),
) -> Tensor {
    let table = window_table(fine, coarse).unwrap();
    let (c, n) = (q.shape()[0], q.shape()[1]);
    let nd = k.shape()[1];
    let t = scale.abs().max(Tape::SCALE_FLOOR);
    let mut out = Tensor::zeros(vec![n, nd]);
    for r in 0..n {
        let allowed: Vec<usize> =
            table.row(r).iter().filter(|&&s| s >= 0).map(|&s| s as usize).collect();
        let logits: Vec<f64> = allowed
            .iter()
            .map(|&j| (0..c).map(|ci| q.at2(ci, r) * k.at2(ci, j)).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| ((v - mx) / t).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in allowed.iter().zip(&exps) {
            out.data_mut()[r * nd + j] = e / denom;
        }
    }
    out
}

fn random_chain(rng: &mut ChaCha12Rng) -> Vec<crate::clustering::AssignmentMatrix> {
    use crate::clustering::{AssignmentLayout, AssignmentMatrix};
    let mut chain = Vec::new();
    let mut grid = (8usize, 8usize);
    for level in 0..3 {
        let coarse = (grid.0 / 2, grid.1 / 2);
        let (n, nd) = (grid.0 * grid.1, coarse.0 * coarse.1);
        let mut w = Tensor::zeros(vec![n, nd]);
        for r in 0..n {
            let row: Vec<f64> = (0..nd).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for j in 0..nd {
                w.data_mut()[r * nd + j] = row[j] / s;
            }
        }
        chain.push(AssignmentMatrix {
            level,
            fine_shape: grid,
            coarse_shape: coarse,
            layout: AssignmentLayout::Dense { weights: w },
        });
        grid = coarse;
    }
    chain
}

fn stochastic_stack(rng: &mut ChaCha12Rng, classes: usize) -> MaskStack {
    let mut v = Tensor::zeros(vec![1, classes]);
    let row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = row.iter().sum();
    for j in 0..classes {
        v.data_mut()[j] = row[j] / s;
    }
    MaskStack::new((1, 1), Semantics::ClassProbs, v).unwrap()
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes_on_clean_build() {
        let results = super::run_all();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(results.len() >= 8);
    }
}
