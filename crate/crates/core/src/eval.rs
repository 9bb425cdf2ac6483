//! Dataset-level evaluation: mIoU / pixel accuracy of semantic output,
//! pooled panoptic quality of instance output, and per-level clustering
//! quality (undersegmentation error, assignment entropy).

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;

use crate::clustering::AssignmentMatrix;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::decode::cluster_partition;
use crate::heads::{postprocess_panoptic, HeadOutput};
use crate::metrics::{
    boundary_map, miou, panoptic_quality, undersegmentation_error, MiouReport, PqReport,
    SegmentMap, UeVariant,
};
use crate::model::SegModel;
use crate::params::ParamStore;
use crate::tensor::Tape;
use crate::train::TrainError;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Semantic quality of the default (soft-decoded) predictions.
    pub miou: MiouReport,
    /// Same metric with every assignment hardened before decoding.
    pub miou_hard: MiouReport,
    pub pq: Option<PqReport>,
    pub pq_hard: Option<PqReport>,
    /// Mean undersegmentation error per hierarchical level (fine→coarse),
    /// from hard-decoded cumulative partitions at full resolution.
    pub ue_per_level: Vec<f64>,
    pub ue_variant: UeVariant,
    /// Mean assignment-row entropy per level, nats.
    pub entropy_per_level: Vec<f64>,
    /// Current signed scale parameter per level.
    pub scales: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "miou": self.miou.mean_iou,
            "miou_hard": self.miou_hard.mean_iou,
            "per_class_iou": self.miou.per_class,
            "pixel_accuracy": self.miou.pixel_accuracy,
            "pq": self.pq.as_ref().map(|p| p.pq),
            "pq_hard": self.pq_hard.as_ref().map(|p| p.pq),
            "sq": self.pq.as_ref().map(|p| p.sq),
            "rq": self.pq.as_ref().map(|p| p.rq),
            "ue_per_level": self.ue_per_level,
            "ue_variant": self.ue_variant,
            "entropy_per_level": self.entropy_per_level,
            "scales": self.scales,
            "samples": self.samples,
        })
    }
}

/// Pooled PQ accumulator across a dataset.
#[derive(Default)]
struct PqPool {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl PqPool {
    fn add(&mut self, r: &PqReport) {
        self.iou_sum += r.sq * r.true_positives as f64;
        self.tp += r.true_positives;
        self.fp += r.false_positives;
        self.fn_ += r.false_negatives;
    }

    fn finalize(&self) -> PqReport {
        let (sq, rq) = if self.tp == 0 {
            if self.fp == 0 && self.fn_ == 0 {
                (1.0, 1.0)
            } else {
                (0.0, 0.0)
            }
        } else {
            (
                self.iou_sum / self.tp as f64,
                self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64),
            )
        };
        PqReport {
            pq: sq * rq,
            sq,
            rq,
            true_positives: self.tp,
            false_positives: self.fp,
            false_negatives: self.fn_,
        }
    }
}

/// Detached per-sample products needed by evaluation and visualization.
/// The `hard_*` twins come from decoding the same coarse stack through
/// hardened assignments (soft decoding is the default inference path).
pub struct SampleEval {
    pub pred_labels: Vec<u32>,
    pub pred_instances: Option<Vec<u32>>,
    pub hard_labels: Vec<u32>,
    pub hard_instances: Option<Vec<u32>>,
    pub assignments: Vec<AssignmentMatrix>,
    pub height: usize,
    pub width: usize,
}

fn argmax_labels(probs: &crate::tensor::Tensor) -> Vec<u32> {
    let cols = probs.cols();
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let _ = cols;
            best as u32
        })
        .collect()
}

/// Value-side hard decode of a detached coarse stack to full resolution.
fn hard_decode_full(
    assignments: &[AssignmentMatrix],
    coarse: crate::tensor::Tensor,
    coarse_grid: (usize, usize),
    semantics: crate::decode::Semantics,
    image: (usize, usize),
) -> Result<crate::tensor::Tensor, TrainError> {
    use crate::decode::{hard_decode, upsample_to_image, MaskStack};
    let stack = MaskStack::new(coarse_grid, semantics, coarse)?;
    let decoded = hard_decode(assignments, &stack)?;
    Ok(upsample_to_image(&decoded, image)?.values)
}

/// Frozen forward pass of one sample, everything detached from the tape.
pub fn eval_sample(
    model: &SegModel,
    store: &ParamStore,
    sample: &crate::data::Sample,
) -> Result<SampleEval, TrainError> {
    let mut tape = Tape::new();
    let binding = store.bind_all_frozen(&mut tape);
    let fwd = model.forward(&mut tape, &binding, &sample.image)?;
    let assignments: Vec<AssignmentMatrix> =
        fwd.pyramid.levels.iter().map(|l| l.assignment.detach(&tape)).collect();
    let image = (sample.height, sample.width);
    let coarse_grid =
        assignments.last().map(|a| a.coarse_shape).unwrap_or(fwd.pyramid.final_grid);
    let (pred_labels, pred_instances, hard_labels, hard_instances) = match fwd.output {
        HeadOutput::PerPixel { class_probs, coarse_probs } => {
            let labels = argmax_labels(&tape.detach(class_probs));
            let hard = hard_decode_full(
                &assignments,
                tape.detach(coarse_probs),
                coarse_grid,
                crate::decode::Semantics::ClassProbs,
                image,
            )?;
            (labels, None, argmax_labels(&hard), None)
        }
        HeadOutput::MaskQuery { class_probs, masks, coarse_masks } => {
            let p = tape.detach(class_probs);
            let pred = postprocess_panoptic(&p, &tape.detach(masks));
            let hard_masks = hard_decode_full(
                &assignments,
                tape.detach(coarse_masks),
                coarse_grid,
                crate::decode::Semantics::MaskProbs,
                image,
            )?;
            let hard = postprocess_panoptic(&p, &hard_masks);
            (pred.labels, Some(pred.instances), hard.labels, Some(hard.instances))
        }
    };
    Ok(SampleEval {
        pred_labels,
        pred_instances,
        hard_labels,
        hard_instances,
        assignments,
        height: sample.height,
        width: sample.width,
    })
}

fn segment_map_from_labels(instances: &[u16], semantic: &[u16]) -> SegmentMap {
    let mut classes = BTreeMap::new();
    for (&inst, &sem) in instances.iter().zip(semantic) {
        classes.entry(inst as u32).or_insert(sem as u32);
    }
    SegmentMap {
        instances: instances.iter().map(|&v| v as u32).collect(),
        classes,
        void_instance: None,
    }
}

fn pred_segment_map(instances: &[u32], labels: &[u32], num_queries: usize, void_label: u32) -> SegmentMap {
    let mut classes = BTreeMap::new();
    for (&inst, &label) in instances.iter().zip(labels) {
        if inst == num_queries as u32 || label == void_label {
            continue;
        }
        classes.entry(inst).or_insert(label);
    }
    SegmentMap {
        instances: instances.to_vec(),
        classes,
        void_instance: Some(num_queries as u32),
    }
}

/// Evaluate a model over a dataset split.
pub fn evaluate(
    model: &SegModel,
    store: &ParamStore,
    cfg: &RunConfig,
    dataset: &Dataset,
    ue_variant: UeVariant,
) -> Result<EvalReport, TrainError> {
    let levels = cfg.backbone.hierarchical_level;
    let mut all_pred: Vec<u32> = Vec::new();
    let mut all_hard: Vec<u32> = Vec::new();
    let mut all_gt: Vec<u32> = Vec::new();
    let mut ue_sums = vec![0.0; levels];
    let mut entropy_sums = vec![0.0; levels];
    let mut pq_pool = PqPool::default();
    let mut pq_hard_pool = PqPool::default();
    let mut any_instances = false;

    for sample in &dataset.samples {
        let ev = eval_sample(model, store, sample)?;
        all_pred.extend_from_slice(&ev.pred_labels);
        all_hard.extend_from_slice(&ev.hard_labels);
        all_gt.extend(sample.semantic.iter().map(|&v| v as u32));

        let gt_sem: Vec<u32> = sample.semantic.iter().map(|&v| v as u32).collect();
        for depth in 1..=ev.assignments.len() {
            let partition = cluster_partition(&ev.assignments, depth, (sample.height, sample.width))?;
            let (ue, _) = undersegmentation_error(&partition, &gt_sem, ue_variant);
            ue_sums[depth - 1] += ue;
            entropy_sums[depth - 1] += ev.assignments[depth - 1].entropy();
        }

        if let Some(instances) = &ev.pred_instances {
            any_instances = true;
            let gt_map = segment_map_from_labels(&sample.instance, &sample.semantic);
            let pred_map = pred_segment_map(
                instances,
                &ev.pred_labels,
                cfg.head.num_queries,
                cfg.head.num_classes as u32,
            );
            pq_pool.add(&panoptic_quality(&pred_map, &gt_map));
            let hard_map = pred_segment_map(
                ev.hard_instances.as_ref().expect("hard instances exist with soft ones"),
                &ev.hard_labels,
                cfg.head.num_queries,
                cfg.head.num_classes as u32,
            );
            pq_hard_pool.add(&panoptic_quality(&hard_map, &gt_map));
        }
    }

    let n = dataset.len().max(1) as f64;
    let scales: Vec<f64> =
        model.backbone.scale_params().iter().map(|&id| store.get(id).data()[0]).collect();
    Ok(EvalReport {
        miou: miou(&all_pred, &all_gt, cfg.head.num_classes),
        miou_hard: miou(&all_hard, &all_gt, cfg.head.num_classes),
        pq: any_instances.then(|| pq_pool.finalize()),
        pq_hard: any_instances.then(|| pq_hard_pool.finalize()),
        ue_per_level: ue_sums.iter().map(|s| s / n).collect(),
        ue_variant,
        entropy_per_level: entropy_sums.iter().map(|s| s / n).collect(),
        scales,
        samples: dataset.len(),
    })
}

/// Per-level boundary and leakage overlays for one sample, plus the final
/// prediction: the data behind the visualization files.
pub struct Visualization {
    /// Per level: (boundary mask, leakage mask) at full resolution.
    pub per_level: Vec<(Vec<bool>, Vec<bool>)>,
    pub pred_labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

pub fn visualize_sample(
    model: &SegModel,
    store: &ParamStore,
    sample: &crate::data::Sample,
    ue_variant: UeVariant,
) -> Result<Visualization, TrainError> {
    let ev = eval_sample(model, store, sample)?;
    let gt_sem: Vec<u32> = sample.semantic.iter().map(|&v| v as u32).collect();
    let mut per_level = Vec::new();
    for depth in 1..=ev.assignments.len() {
        let partition = cluster_partition(&ev.assignments, depth, (sample.height, sample.width))?;
        let boundaries = boundary_map(&partition, sample.height, sample.width);
        let (_, leakage) = undersegmentation_error(&partition, &gt_sem, ue_variant);
        per_level.push((boundaries, leakage));
    }
    Ok(Visualization {
        per_level,
        pred_labels: ev.pred_labels,
        height: sample.height,
        width: sample.width,
    })
}
