//! Training: per-head loss assembly, batched gradient descent, checkpoints.

pub mod adamw;
pub mod hungarian;
pub mod losses;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{Dataset, Sample};
use crate::heads::HeadOutput;
use crate::model::{ModelError, SegModel};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};
use adamw::AdamW;
use hungarian::hungarian_match;
use losses::{
    bce_mask_loss, bce_scalar, classification_loss, dice_loss, dice_scalar, scale_regularizer,
    LossWeights,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] crate::decode::DecodeError),
    #[error("dataset split is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

/// Scalar loss components of one sample or one batch.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub reg: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.bce += o.bce;
        self.dice += o.dice;
        self.cls += o.cls;
        self.reg += o.reg;
    }

    fn scale(&mut self, f: f64) {
        self.total *= f;
        self.bce *= f;
        self.dice *= f;
        self.cls *= f;
        self.reg *= f;
    }
}

/// Build the total training loss for one sample's forward pass.
///
/// Per-pixel head: pixel cross-entropy on the decoded class probabilities
/// plus the scale regularizer. Mask-query head: bipartite matching on
/// detached costs, then `λ_ce·BCE + λ_dice·Dice + λ_cls·CE + λ_reg·Σ|s|` on
/// full-resolution decoded masks.
pub fn build_loss(
    tape: &mut Tape,
    output: &HeadOutput,
    sample: &Sample,
    weights: &LossWeights,
    scale_refs: &[TensorRef],
) -> Result<(TensorRef, LossParts), TrainError> {
    let reg = scale_regularizer(tape, scale_refs)?;
    let reg_v = tape.data(reg)[0];
    match output {
        HeadOutput::PerPixel { class_probs, .. } => {
            let n = sample.semantic.len();
            let targets: Vec<usize> = sample.semantic.iter().map(|&v| v as usize).collect();
            let pix_weights = vec![1.0 / n as f64; n];
            let ce = tape.nll_rows(*class_probs, &targets, &pix_weights)?;
            let ce_v = tape.data(ce)[0];
            let reg_term = tape.scale(reg, weights.lambda_reg)?;
            let total = tape.add(ce, reg_term)?;
            let parts = LossParts {
                total: tape.data(total)[0],
                cls: ce_v,
                reg: reg_v,
                ..Default::default()
            };
            Ok((total, parts))
        }
        HeadOutput::MaskQuery { class_probs, masks, .. } => {
            let segments = sample.segments();
            let p = tape.detach(*class_probs);
            let m = tape.detach(*masks);
            let (nq, npix) = (p.rows(), m.rows());

            // matching cost on detached values
            let mut cost = Tensor::zeros(vec![nq, segments.len()]);
            for (g, seg) in segments.iter().enumerate() {
                for q in 0..nq {
                    let col: Vec<f64> = (0..npix).map(|r| m.at2(r, q)).collect();
                    let c = weights.lambda_ce * bce_scalar(&col, &seg.mask)
                        + weights.lambda_dice * dice_scalar(&col, &seg.mask, weights.dice_smoothing)
                        + weights.lambda_cls * (-p.at2(q, seg.class));
                    cost.data_mut()[q * segments.len() + g] = c;
                }
            }
            let matching = hungarian_match(&cost)?;

            // stacked targets for the matched queries, in pair order
            let cols: Vec<usize> = matching.pairs.iter().map(|&(q, _)| q).collect();
            let mut target = Tensor::zeros(vec![npix, cols.len()]);
            for (j, &(_, g)) in matching.pairs.iter().enumerate() {
                for r in 0..npix {
                    target.data_mut()[r * cols.len() + j] = segments[g].mask[r];
                }
            }
            let selected = tape.select_cols(*masks, &cols)?;
            let bce = bce_mask_loss(tape, selected, &target)?;
            let dice = dice_loss(tape, selected, &target, weights.dice_smoothing)?;
            let classes: Vec<usize> = segments.iter().map(|s| s.class).collect();
            let cls = classification_loss(tape, *class_probs, &matching, &classes, weights.no_object_weight)?;

            let parts_raw = (tape.data(bce)[0], tape.data(dice)[0], tape.data(cls)[0]);
            let bce_t = tape.scale(bce, weights.lambda_ce)?;
            let dice_t = tape.scale(dice, weights.lambda_dice)?;
            let cls_t = tape.scale(cls, weights.lambda_cls)?;
            let reg_t = tape.scale(reg, weights.lambda_reg)?;
            let mask_sum = tape.add(bce_t, dice_t)?;
            let with_cls = tape.add(mask_sum, cls_t)?;
            let total = tape.add(with_cls, reg_t)?;
            let parts = LossParts {
                total: tape.data(total)[0],
                bce: parts_raw.0,
                dice: parts_raw.1,
                cls: parts_raw.2,
                reg: reg_v,
            };
            Ok((total, parts))
        }
    }
}

struct SamplePass {
    grads: Vec<Vec<f64>>,
    parts: LossParts,
    entropies: Vec<f64>,
    scale_floor_hits: usize,
}

fn sample_pass(
    model: &SegModel,
    store: &ParamStore,
    weights: &LossWeights,
    sample: &Sample,
) -> Result<SamplePass, TrainError> {
    let mut tape = Tape::new();
    let binding = store.bind_all(&mut tape);
    let fwd = model.forward(&mut tape, &binding, &sample.image)?;
    let scale_refs: Vec<TensorRef> =
        model.backbone.scale_params().iter().map(|&id| binding.get(id)).collect();
    let (total, parts) = build_loss(&mut tape, &fwd.output, sample, weights, &scale_refs)?;
    tape.backward(total)?;
    let entropies =
        fwd.pyramid.levels.iter().map(|l| l.assignment.detach(&tape).entropy()).collect();
    Ok(SamplePass {
        grads: binding.gradients(&tape, store),
        parts,
        entropies,
        scale_floor_hits: tape.scale_floor_hits(),
    })
}

/// Products of a full training run, kept in memory; persisting them is the
/// caller's concern.
pub struct TrainReport {
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Batch-mean total loss at every step.
    pub loss_trajectory: Vec<f64>,
    /// One JSON record per log interval.
    pub records: Vec<serde_json::Value>,
    pub steps_run: usize,
}

/// Gradient-descent loop: epochs of shuffled batches, mean-reduced sample
/// gradients (fixed summation order), one AdamW update per step. When a
/// validation split is given, it is scored every `eval_interval` steps and
/// the metrics land in the log records.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut store = ParamStore::new(cfg.seed);
    let model = SegModel::build(cfg, &mut store)?;
    let mut optimizer = AdamW::new(cfg.optim.adamw.clone(), &store);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x7261696e);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len(); // forces an initial shuffle
    let decay_at = (cfg.optim.max_steps as f64 * cfg.optim.lr_decay_fraction).floor() as usize;

    let mut loss_trajectory = Vec::with_capacity(cfg.optim.max_steps);
    let mut records = Vec::new();

    for step in 0..cfg.optim.max_steps {
        // next batch of indices, reshuffling at epoch boundaries
        let mut batch = Vec::with_capacity(cfg.optim.batch_size);
        for _ in 0..cfg.optim.batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let passes: Vec<Result<SamplePass, TrainError>> = batch
            .par_iter()
            .map(|&i| sample_pass(&model, &store, &cfg.loss, &train_set.samples[i]))
            .collect();

        // ordered reduction over samples
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut parts = LossParts::default();
        let mut entropies: Vec<f64> = Vec::new();
        let mut floor_hits = 0usize;
        for pass in passes {
            let pass = pass?;
            floor_hits += pass.scale_floor_hits;
            parts.add(&pass.parts);
            if entropies.is_empty() {
                entropies = pass.entropies.clone();
            } else {
                for (e, v) in entropies.iter_mut().zip(&pass.entropies) {
                    *e += v;
                }
            }
            match &mut grads {
                None => grads = Some(pass.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&pass.grads) {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut grads = grads.expect("batch is non-empty");
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        parts.scale(inv);
        for e in &mut entropies {
            *e *= inv;
        }

        let grad_norm = {
            let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
            sq.sqrt()
        };
        if cfg.optim.max_grad_norm > 0.0 && grad_norm > cfg.optim.max_grad_norm {
            let shrink = cfg.optim.max_grad_norm / grad_norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= shrink;
                }
            }
        }

        let lr_scale = if step >= decay_at { cfg.optim.lr_decay_factor } else { 1.0 };
        optimizer.apply(&mut store, &grads, lr_scale);
        loss_trajectory.push(parts.total);

        if step % cfg.log_interval == 0 || step + 1 == cfg.optim.max_steps {
            let scales: Vec<f64> = model
                .backbone
                .scale_params()
                .iter()
                .map(|&id| store.get(id).data()[0])
                .collect();
            records.push(json!({
                "step": step,
                "grad_norm": grad_norm,
                "loss": parts.total,
                "bce": parts.bce,
                "dice": parts.dice,
                "cls": parts.cls,
                "reg": parts.reg,
                "lr_scale": lr_scale,
                "scales": scales,
                "assignment_entropy": entropies,
                "scale_floor_hits": floor_hits,
            }));
        }

        if let Some(val) = val_set {
            if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && !val.is_empty() {
                let report =
                    crate::eval::evaluate(&model, &store, cfg, val, crate::metrics::UeVariant::Min)?;
                records.push(json!({ "step": step + 1, "val": report.to_json() }));
            }
        }
    }

    Ok(TrainReport {
        store,
        optimizer,
        loss_trajectory,
        records,
        steps_run: cfg.optim.max_steps,
    })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Versioned JSON container of named parameter tensors + optimizer state.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub step: u64,
    params: Vec<NamedTensor>,
    optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, optimizer: Option<&AdamW>, cfg: &RunConfig, step: u64) -> Self {
        Checkpoint {
            schema_version: 1,
            config_hash: cfg.model_hash(),
            step,
            params: store
                .iter_named()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json)
            .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint, TrainError> {
        let bytes = std::fs::read(path)
            .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    /// Overwrite a freshly built store's values by name; every name must
    /// match in both directions.
    pub fn restore_into(&self, store: &mut ParamStore, expect_hash: Option<&str>) -> Result<Option<AdamW>, TrainError> {
        if let Some(expect) = expect_hash {
            if expect != self.config_hash {
                return Err(TrainError::Checkpoint(format!(
                    "config hash {} does not match checkpoint {}",
                    expect, self.config_hash
                )));
            }
        }
        if self.params.len() != store.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for saved in &self.params {
            let id = store
                .ids()
                .find(|&id| store.name(id) == saved.name)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor {}", saved.name)))?;
            let target = store.get_mut(id);
            if target.shape() != saved.shape.as_slice() {
                return Err(TrainError::Checkpoint(format!(
                    "{}: shape {:?} vs {:?}",
                    saved.name,
                    saved.shape,
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(&saved.data);
        }
        Ok(self.optimizer.clone())
    }
}
