//! Detection scoring: per-class average precision at tIoU thresholds, mAP,
//! and the average mAP over the fixed 0.5..0.95 grid.

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::proposals::AnnotationFile;
use crate::timeline::{tiou, TemporalInterval};

/// One ground-truth instance, flattened for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub class: u32,
    pub interval: TemporalInterval,
}

/// Extract the evaluation ground truth from an annotation file.
pub fn ground_truths(annotations: &AnnotationFile) -> Vec<GroundTruth> {
    annotations
        .videos
        .iter()
        .flat_map(|v| {
            v.instances.iter().map(|inst| GroundTruth {
                video_id: v.video_id.clone(),
                class: inst.class,
                interval: inst.interval,
            })
        })
        .collect()
}

/// Whether a detection-to-instance overlap counts as correct: strictly
/// greater than the threshold (the default), or greater-or-equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchRule {
    Strict,
    Inclusive,
}

impl MatchRule {
    fn accepts(&self, overlap: f64, threshold: f64) -> bool {
        match self {
            MatchRule::Strict => overlap > threshold,
            MatchRule::Inclusive => overlap >= threshold,
        }
    }
}

/// Average precision per class and threshold, with the derived means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub thresholds: Vec<f64>,
    /// One row per class with at least one ground-truth instance.
    pub per_class: Vec<ClassResult>,
    /// Unweighted mean of per-class APs, one per threshold.
    pub map_per_threshold: Vec<f64>,
    /// Mean of mAP over tIoU thresholds 0.5, 0.55, ..., 0.95.
    pub average_map: f64,
    /// Classes that appear in detections but have no ground truth; they are
    /// excluded from every mean.
    pub skipped_classes: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: u32,
    pub ap_per_threshold: Vec<f64>,
}

/// The fixed grid the average mAP is computed over.
pub fn average_map_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn sort_for_matching(dets: &mut Vec<&Detection>) {
    dets.sort_by(|a, b| {
        b.score_s
            .total_cmp(&a.score_s)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.interval.start().cmp(&b.interval.start()))
            .then(a.interval.end().cmp(&b.interval.end()))
    });
}

/// Greedy matching at one threshold: detections in score order claim the
/// best-overlapping unmatched instance of the same video and class. Returns
/// the per-detection true-positive flags in that score order.
fn match_detections(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    threshold: f64,
    rule: MatchRule,
) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|det| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if matched[gi] || gt.video_id != det.video_id {
                    continue;
                }
                let overlap = tiou(&det.interval, &gt.interval);
                if !rule.accepts(overlap, threshold) {
                    continue;
                }
                let better = match best {
                    Some((_, existing)) => overlap > existing,
                    None => true,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision (area under the precision
/// envelope) from score-ordered true-positive flags.
fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    if n == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in tp_flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope: running max from the right
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if tp_flags[i] {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
    }
    ap
}

fn ap_for_class(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    threshold: f64,
    rule: MatchRule,
) -> f64 {
    let flags = match_detections(dets, gts, threshold, rule);
    average_precision(&flags, gts.len())
}

/// Score detections against ground truth at each requested threshold.
/// The average mAP is always computed over the fixed 0.5..0.95 grid,
/// independent of the requested thresholds.
pub fn evaluate(
    detections: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    rule: MatchRule,
) -> EvaluationResult {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut skipped: Vec<u32> = detections
        .iter()
        .map(|d| d.class)
        .filter(|c| !classes.contains(c))
        .collect();
    skipped.sort_unstable();
    skipped.dedup();

    let mut per_class_sorted: Vec<(u32, Vec<&Detection>, Vec<&GroundTruth>)> = classes
        .iter()
        .map(|&class| {
            let mut dets: Vec<&Detection> =
                detections.iter().filter(|d| d.class == class).collect();
            sort_for_matching(&mut dets);
            let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
            (class, dets, class_gts)
        })
        .collect();

    let ap_table = |threshold: f64| -> Vec<f64> {
        per_class_sorted
            .iter()
            .map(|(_, dets, class_gts)| ap_for_class(dets, class_gts, threshold, rule))
            .collect()
    };

    let per_threshold_aps: Vec<Vec<f64>> = thresholds.iter().map(|&t| ap_table(t)).collect();
    let map_per_threshold: Vec<f64> = per_threshold_aps
        .iter()
        .map(|aps| {
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();

    let average_map = {
        let grid = average_map_grid();
        let maps: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let aps = ap_table(t);
                if aps.is_empty() {
                    0.0
                } else {
                    aps.iter().sum::<f64>() / aps.len() as f64
                }
            })
            .collect();
        maps.iter().sum::<f64>() / maps.len() as f64
    };

    let per_class = per_class_sorted
        .drain(..)
        .enumerate()
        .map(|(ci, (class, _, _))| ClassResult {
            class,
            ap_per_threshold: per_threshold_aps.iter().map(|aps| aps[ci]).collect(),
        })
        .collect();

    EvaluationResult {
        thresholds: thresholds.to_vec(),
        per_class,
        map_per_threshold,
        average_map,
        skipped_classes: skipped,
    }
}

/// Render the result as a CSV table with thresholds as columns: one row per
/// class, a mAP row, and a trailing average-mAP row.
pub fn metrics_csv(result: &EvaluationResult) -> String {
    let mut out = String::from("class");
    for t in &result.thresholds {
        out.push_str(&format!(",{t:.2}"));
    }
    out.push('\n');
    for row in &result.per_class {
        out.push_str(&row.class.to_string());
        for ap in &row.ap_per_threshold {
            out.push_str(&format!(",{ap:.4}"));
        }
        out.push('\n');
    }
    out.push_str("mAP");
    for m in &result.map_per_threshold {
        out.push_str(&format!(",{m:.4}"));
    }
    out.push('\n');
    out.push_str(&format!("average_mAP[0.50:0.05:0.95],{:.4}", result.average_map));
    for _ in 1..result.thresholds.len() {
        out.push(',');
    }
    out.push('\n');
    out
}
