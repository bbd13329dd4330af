//! Frame-AP evaluation at a fixed IoU threshold with Head/Mid/Tail
//! long-tail reporting.
//!
//! Multi-label ground-truth boxes are expanded into one class-specific GT
//! per label and every class is evaluated independently: detections are
//! matched greedily by descending score (score ties broken by box
//! coordinates), and AP uses the all-point interpolated precision envelope.

mod report;

pub use report::{render_chart, render_report, report_csv};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{canonical_ts_bits, BoxCoords, Keyframe};
use crate::error::{Error, Result};

/// IoU threshold of the frame-AP protocol.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Head/Mid/Tail boundaries on training label counts.
pub const HEAD_COUNT_THRESHOLD: u64 = 10_000;
pub const TAIL_COUNT_THRESHOLD: u64 = 1_000;

/// One scored, class-specific box prediction on a keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub clip_id: String,
    pub timestamp: f64,
    pub coords: BoxCoords,
    pub class: u32,
    pub score: f64,
}

/// Frequency group of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Head,
    Mid,
    Tail,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Group::Head => write!(f, "Head"),
            Group::Mid => write!(f, "Mid"),
            Group::Tail => write!(f, "Tail"),
        }
    }
}

/// Per-class AP plus group and overall aggregates.
///
/// `per_class_ap` holds only classes with at least one GT instance; the
/// others are reported absent and excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub gt_counts: BTreeMap<u32, u64>,
    pub groups: BTreeMap<u32, Group>,
    pub group_map: BTreeMap<Group, Option<f64>>,
    pub overall_map: Option<f64>,
    /// Training-set label frequency the grouping was computed from.
    pub label_frequency: BTreeMap<u32, u64>,
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching of same-class detections against GT boxes on
/// one keyframe. Detections are taken in descending score order (ties broken
/// by box coordinates); each matches the highest-IoU unmatched GT with
/// IoU >= `iou_threshold` (TP) or is a FP.
pub fn match_detections(
    detections: &[(BoxCoords, f64)],
    gt_boxes: &[BoxCoords],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .partial_cmp(&detections[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(detections[a].0.lex_cmp(&detections[b].0))
    });
    let mut matched_gt = vec![false; gt_boxes.len()];
    let mut flags = vec![false; detections.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gt_boxes.iter().enumerate() {
            if matched_gt[gi] {
                continue;
            }
            let v = iou(&detections[di].0, gt);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched_gt[gi] = true;
            flags[di] = true;
        }
    }
    flags
}

/// Average precision from per-detection TP flags and scores against `num_gt`
/// ground-truth instances, using the all-point precision envelope.
///
/// Returns `None` when `num_gt == 0`: the class is excluded, not an error.
pub fn average_precision(flags_scores: &[(bool, f64)], num_gt: u64) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(bool, f64)> = flags_scores.to_vec();
    // Stable sort: the caller's deterministic order breaks score ties.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let n = ranked.len();
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0u64;
    for (i, (flag, _)) in ranked.iter().enumerate() {
        if *flag {
            tp += 1;
        }
        precision.push(tp as f64 / (i as f64 + 1.0));
    }
    // Envelope: precision at each recall point is the max at any >= recall.
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for (i, (flag, _)) in ranked.iter().enumerate() {
        if *flag {
            ap += precision[i];
        }
    }
    Some(ap / num_gt as f64)
}

/// Assign classes to Head/Mid/Tail by their training label counts:
/// `count > head_threshold` is Head, `count < tail_threshold` is Tail,
/// anything else Mid.
pub fn group_classes(
    label_frequency: &BTreeMap<u32, u64>,
    head_threshold: u64,
    tail_threshold: u64,
) -> BTreeMap<u32, Group> {
    label_frequency
        .iter()
        .map(|(&c, &n)| {
            let g = if n > head_threshold {
                Group::Head
            } else if n < tail_threshold {
                Group::Tail
            } else {
                Group::Mid
            };
            (c, g)
        })
        .collect()
}

fn canonical_detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.coords.lex_cmp(&b.coords))
        .then_with(|| a.clip_id.cmp(&b.clip_id))
        .then_with(|| a.timestamp.partial_cmp(&b.timestamp).unwrap_or(std::cmp::Ordering::Equal))
}

/// Frame AP over all keyframes pooled, per class, plus the overall mean.
///
/// Predictions must reference known `(clip_id, timestamp)` pairs; unknown
/// references are collected into one error. Grouping uses the evaluation GT
/// counts; use [`APReport::regroup`] to apply training-set frequencies.
pub fn frame_map(
    ground_truth: &[Keyframe],
    predictions: &[Detection],
    num_classes: usize,
) -> Result<APReport> {
    type FrameKey = (String, u64);
    let keys: BTreeSet<FrameKey> = ground_truth.iter().map(|kf| kf.key()).collect();
    let mut offenders: Vec<String> = Vec::new();
    for d in predictions {
        let key = (d.clip_id.clone(), canonical_ts_bits(d.timestamp));
        if !keys.contains(&key) {
            let label = format!("{}@{}", d.clip_id, d.timestamp);
            if !offenders.contains(&label) {
                offenders.push(label);
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::UnknownKeyframes(offenders.join(", ")));
    }

    // Expand multi-label GT into per-class boxes, pooled per keyframe.
    let mut gt_by_class: BTreeMap<u32, BTreeMap<FrameKey, Vec<BoxCoords>>> = BTreeMap::new();
    let mut gt_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for kf in ground_truth {
        let key = kf.key();
        for b in &kf.boxes {
            for &label in &b.labels {
                gt_by_class
                    .entry(label)
                    .or_default()
                    .entry(key.clone())
                    .or_default()
                    .push(b.coords);
                *gt_counts.entry(label).or_insert(0) += 1;
            }
        }
    }

    let mut det_by_class: BTreeMap<u32, BTreeMap<FrameKey, Vec<Detection>>> = BTreeMap::new();
    for d in predictions {
        if d.class as usize >= num_classes {
            return Err(Error::Other(format!(
                "prediction class {} outside [0, {num_classes})",
                d.class
            )));
        }
        det_by_class
            .entry(d.class)
            .or_default()
            .entry((d.clip_id.clone(), canonical_ts_bits(d.timestamp)))
            .or_default()
            .push(d.clone());
    }

    let mut per_class_ap = BTreeMap::new();
    for class in 0..num_classes as u32 {
        let num_gt = gt_counts.get(&class).copied().unwrap_or(0);
        if num_gt == 0 {
            continue; // absent: no GT for this class
        }
        let empty_frames = BTreeMap::new();
        let class_dets = det_by_class.get(&class).unwrap_or(&empty_frames);
        let mut pooled: Vec<(bool, f64)> = Vec::new();
        let class_gt = gt_by_class.get(&class).expect("gt exists when num_gt > 0");
        // Matching is per keyframe; flags and scores pool across keyframes.
        for (key, dets) in class_dets {
            let mut dets = dets.clone();
            dets.sort_by(canonical_detection_order);
            let gt = class_gt.get(key).map(Vec::as_slice).unwrap_or(&[]);
            let pairs: Vec<(BoxCoords, f64)> = dets.iter().map(|d| (d.coords, d.score)).collect();
            let flags = match_detections(&pairs, gt, IOU_THRESHOLD);
            pooled.extend(flags.into_iter().zip(dets.iter().map(|d| d.score)));
        }
        // Deterministic pooled order for the final stable sort.
        pooled.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let ap = average_precision(&pooled, num_gt).expect("num_gt > 0");
        per_class_ap.insert(class, ap);
    }

    let groups = group_classes(&gt_counts, HEAD_COUNT_THRESHOLD, TAIL_COUNT_THRESHOLD);
    Ok(assemble_report(per_class_ap, gt_counts.clone(), groups, gt_counts))
}

fn assemble_report(
    per_class_ap: BTreeMap<u32, f64>,
    gt_counts: BTreeMap<u32, u64>,
    groups: BTreeMap<u32, Group>,
    label_frequency: BTreeMap<u32, u64>,
) -> APReport {
    let mut group_sums: BTreeMap<Group, (f64, usize)> = BTreeMap::new();
    for (&c, &ap) in &per_class_ap {
        let g = groups.get(&c).copied().unwrap_or(Group::Tail);
        let e = group_sums.entry(g).or_insert((0.0, 0));
        e.0 += ap;
        e.1 += 1;
    }
    let mut group_map = BTreeMap::new();
    for g in [Group::Head, Group::Mid, Group::Tail] {
        group_map.insert(
            g,
            group_sums.get(&g).map(|&(s, n)| s / n as f64),
        );
    }
    let overall_map = if per_class_ap.is_empty() {
        None
    } else {
        Some(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
    };
    APReport {
        per_class_ap,
        gt_counts,
        groups,
        group_map,
        overall_map,
        label_frequency,
    }
}

impl APReport {
    /// Recompute the Head/Mid/Tail grouping from a training-set frequency
    /// table and the given thresholds.
    pub fn regroup(
        &self,
        label_frequency: &BTreeMap<u32, u64>,
        head_threshold: u64,
        tail_threshold: u64,
    ) -> APReport {
        let groups = group_classes(label_frequency, head_threshold, tail_threshold);
        assemble_report(
            self.per_class_ap.clone(),
            self.gt_counts.clone(),
            groups,
            label_frequency.clone(),
        )
    }

    pub fn group_mean(&self, g: Group) -> Option<f64> {
        self.group_map.get(&g).copied().flatten()
    }
}
