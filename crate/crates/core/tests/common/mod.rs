//! Helpers shared by the gradient and acceptance suites.
//!
//! Each test binary compiles its own copy, so not every helper is used in
//! every binary.
#![allow(dead_code)]

use hierseg::backbone::BackboneConfig;
use hierseg::config::RunConfig;
use hierseg::data::synth::{render_sample, SyntheticSpec};
use hierseg::data::Sample;
use hierseg::heads::HeadConfig;
use hierseg::tensor::{finite_difference, rel_close, Tape, Tensor, TensorRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

pub fn unit_cols(c: usize, n: usize, rng: &mut ChaCha12Rng) -> Tensor {
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

pub fn normalize_cols(t: &mut Tensor) {
    let (c, n) = (t.shape()[0], t.shape()[1]);
    for j in 0..n {
        let norm: f64 = (0..c).map(|i| t.data()[i * n + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..c {
            t.data_mut()[i * n + j] /= norm;
        }
    }
}

/// A scalar readout weighting every coordinate differently, so a gradient
/// wrong in any position is caught.
pub fn weighted_sum(tape: &mut Tape, t: TensorRef) -> TensorRef {
    let n: usize = tape.shape(t).iter().product();
    let w = Tensor::new(
        vec![n],
        (0..n).map(|i| 0.3 + 0.7 * ((i * 2654435761) % 97) as f64 / 97.0).collect(),
    )
    .unwrap();
    let wr = tape.constant(&w);
    let flat = tape.reshape(t, vec![n]).unwrap();
    let prod = tape.mul(flat, wr).unwrap();
    tape.sum(prod).unwrap()
}

/// Compare the tape gradient of a scalar-producing computation against
/// central differences, perturbing `inputs[which]`.
pub fn check_grad(
    inputs: &[Tensor],
    which: usize,
    tol: f64,
    build: &dyn Fn(&mut Tape, &[TensorRef]) -> TensorRef,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &refs);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic = tape.grad(refs[which]).ok_or("no gradient")?.to_vec();

    let mut probe_inputs: Vec<Tensor> = inputs.to_vec();
    let numeric = finite_difference(
        &mut |x: &Tensor| {
            probe_inputs[which] = x.clone();
            let mut tape = Tape::new();
            let refs: Vec<TensorRef> = probe_inputs.iter().map(|t| tape.constant(t)).collect();
            let loss = build(&mut tape, &refs);
            tape.data(loss)[0]
        },
        &inputs[which],
        FD_STEP,
    )
    .map_err(|e| e.to_string())?;

    for (i, (&a, &n)) in analytic.iter().zip(numeric.data()).enumerate() {
        if !rel_close(a, n, tol) {
            return Err(format!("input {which} coord {i}: analytic {a} vs numeric {n}"));
        }
    }
    Ok(())
}

/// Small model whose full-loss gradient can be finite-differenced quickly.
pub fn micro_config(head: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.head = HeadConfig {
        kind: head.into(),
        num_classes: 4,
        num_queries: 3,
        query_dim: 4,
        mask_dim: 4,
        decoder_layers: 1,
        attention_heads: 1,
        ffn_multiplier: 2,
    };
    cfg.backbone = BackboneConfig {
        stem_channels: 3,
        stage_channels: vec![4, 5],
        feature_dim: 4,
        hierarchical_level: 2,
        ..Default::default()
    };
    cfg
}

pub fn micro_sample() -> Sample {
    let spec = SyntheticSpec { image_size: 16, size_min: 3, size_max: 5, ..Default::default() };
    render_to_sample(&spec, 0)
}

pub fn render_to_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let r = render_sample(spec, index);
    let (w, h) = (r.image.width, r.image.height);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = r.image.pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, h, w], data).unwrap(),
        semantic: r.semantic.labels,
        instance: r.instance.labels,
        height: h,
        width: w,
    }
}
