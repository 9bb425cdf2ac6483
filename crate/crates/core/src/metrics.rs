//! Evaluation metrics: undersegmentation error of cluster partitions,
//! confusion-matrix mIoU, a panoptic quality score, and boundary maps.

use serde::Serialize;
use std::collections::BTreeMap;

/// Which undersegmentation-error formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UeVariant {
    /// Corrected form: per overlapping (cluster, segment) pair, count
    /// `min(|C∩S|, |C\S|)` pixels.
    Min,
    /// Original form: every pixel of every overlapping cluster counts, minus
    /// the segment's own area.
    LeakAll,
}

/// Undersegmentation error plus the binary per-pixel leakage mask (pixels
/// whose min side was counted) used for overlays.
pub fn undersegmentation_error(
    partition: &[u32],
    gt: &[u32],
    variant: UeVariant,
) -> (f64, Vec<bool>) {
    assert_eq!(partition.len(), gt.len(), "resolution mismatch");
    let n = partition.len();
    // pixel lists per (cluster, segment) overlap and per-cluster sizes
    let mut cluster_size: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in partition {
        *cluster_size.entry(c).or_insert(0) += 1;
    }
    let mut overlap: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        overlap.entry((gt[i], partition[i])).or_default().push(i);
    }
    let mut err = 0.0;
    let mut mask = vec![false; n];
    match variant {
        UeVariant::Min => {
            for ((_, cluster), pixels) in &overlap {
                let inter = pixels.len();
                let outside = cluster_size[cluster] - inter;
                if inter <= outside {
                    err += inter as f64;
                    for &p in pixels {
                        mask[p] = true;
                    }
                } else {
                    err += outside as f64;
                    // the counted side lies outside this segment
                    for i in 0..n {
                        if partition[i] == *cluster && gt[i] != pixels.first().map(|&p| gt[p]).unwrap_or(u32::MAX) {
                            mask[i] = true;
                        }
                    }
                }
            }
        }
        UeVariant::LeakAll => {
            // Σ_S (Σ_{C∩S≠∅} |C|) − N
            let mut seg_clusters: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (&(seg, cluster), _) in &overlap {
                seg_clusters.entry(seg).or_default().push(cluster);
            }
            for (seg, clusters) in &seg_clusters {
                let mut total = 0usize;
                for c in clusters {
                    total += cluster_size[c];
                }
                let seg_size = gt.iter().filter(|&&g| g == *seg).count();
                err += (total - seg_size) as f64;
                for i in 0..n {
                    if gt[i] != *seg && clusters.contains(&partition[i]) {
                        mask[i] = true;
                    }
                }
            }
        }
    }
    (err / n as f64, mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    /// IoU per class id present in prediction or ground truth.
    pub per_class: BTreeMap<u32, f64>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

/// Dataset-level confusion-matrix IoU; classes absent from both prediction
/// and ground truth are excluded from the mean. Labels equal to
/// `num_classes` are the void bucket: they count against recall but are
/// never reported as a class.
pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize) -> MiouReport {
    assert_eq!(pred.len(), gt.len(), "resolution mismatch");
    let k = num_classes;
    let kv = k + 1; // trailing void bucket
    let mut conf = vec![0u64; kv * kv];
    let mut correct = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        assert!(p <= k && g <= k, "label out of range");
        conf[g * kv + p] += 1;
        if p == g && p < k {
            correct += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = conf[c * kv + c];
        let gt_total: u64 = (0..kv).map(|p| conf[c * kv + p]).sum();
        let pred_total: u64 = (0..kv).map(|g| conf[g * kv + c]).sum();
        let union = gt_total + pred_total - tp;
        if union == 0 {
            continue; // absent in both
        }
        let iou = tp as f64 / union as f64;
        per_class.insert(c as u32, iou);
        sum += iou;
        present += 1;
    }
    let mean_iou = if present == 0 { 0.0 } else { sum / present as f64 };
    MiouReport { per_class, mean_iou, pixel_accuracy: correct as f64 / pred.len() as f64 }
}

/// One labeled segment: per-pixel instance ids with a class per instance.
#[derive(Debug, Clone)]
pub struct SegmentMap {
    /// Per-pixel instance id; `void_instance` pixels belong to no segment.
    pub instances: Vec<u32>,
    /// Class of each instance id present.
    pub classes: BTreeMap<u32, u32>,
    pub void_instance: Option<u32>,
}

impl SegmentMap {
    fn segments(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.instances.iter().enumerate() {
            if Some(id) == self.void_instance {
                continue;
            }
            out.entry(id).or_default().push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Panoptic quality: segments of equal class match when IoU > 0.5 (such a
/// match is unique); `PQ = SQ·RQ` by construction.
pub fn panoptic_quality(pred: &SegmentMap, gt: &SegmentMap) -> PqReport {
    assert_eq!(pred.instances.len(), gt.instances.len(), "resolution mismatch");
    let pred_segs = pred.segments();
    let gt_segs = gt.segments();

    // pixels that are void in gt are excluded from IoU denominators
    let gt_void: Vec<bool> = gt
        .instances
        .iter()
        .map(|&id| Some(id) == gt.void_instance)
        .collect();

    let mut iou_sum = 0.0;
    let mut tp = 0usize;
    let mut matched_pred: Vec<u32> = Vec::new();
    let mut matched_gt: Vec<u32> = Vec::new();
    for (&gid, gpix) in &gt_segs {
        let gclass = gt.classes[&gid];
        for (&pid, ppix) in &pred_segs {
            if pred.classes[&pid] != gclass {
                continue;
            }
            let inter = intersection_count(gpix, ppix);
            if inter == 0 {
                continue;
            }
            let pred_void_overlap = ppix.iter().filter(|&&i| gt_void[i]).count();
            let union = gpix.len() + ppix.len() - inter - pred_void_overlap;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                iou_sum += iou;
                tp += 1;
                matched_pred.push(pid);
                matched_gt.push(gid);
            }
        }
    }
    let fp = pred_segs.keys().filter(|id| !matched_pred.contains(id)).count();
    let fn_ = gt_segs.keys().filter(|id| !matched_gt.contains(id)).count();

    let (sq, rq) = if tp == 0 {
        if fp == 0 && fn_ == 0 {
            (1.0, 1.0) // vacuously perfect: nothing predicted, nothing expected
        } else {
            (0.0, 0.0)
        }
    } else {
        (iou_sum / tp as f64, tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64))
    };
    PqReport { pq: sq * rq, sq, rq, true_positives: tp, false_positives: fp, false_negatives: fn_ }
}

fn intersection_count(a: &[usize], b: &[usize]) -> usize {
    // both sorted ascending by construction
    let mut i = 0;
    let mut j = 0;
    let mut count = 0;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Marks a pixel iff any 4-neighbor carries a different label.
pub fn boundary_map(labels: &[u32], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(labels.len(), h * w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = labels[y * w + x];
            let differs = (x > 0 && labels[y * w + x - 1] != v)
                || (x + 1 < w && labels[y * w + x + 1] != v)
                || (y > 0 && labels[(y - 1) * w + x] != v)
                || (y + 1 < h && labels[(y + 1) * w + x] != v);
            out[y * w + x] = differs;
        }
    }
    out
}
