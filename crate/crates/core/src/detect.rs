//! Turning head outputs into final detections: combined scoring, greedy
//! temporal NMS, and regression-based boundary refinement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::{decode_offsets, tiou, OffsetPair, TemporalInterval};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("malformed detection line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("stored combined score {stored} does not equal i * exp(a) = {expected}")]
    ScoreMismatch { stored: f64, expected: f64 },
    #[error("refinement list length {regs} does not match {dets} detections")]
    LengthMismatch { dets: usize, regs: usize },
}

/// One scored detection. The combined score is always `i * e^a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub class: u32,
    #[serde(flatten)]
    pub interval: TemporalInterval,
    pub score_a: f64,
    pub score_i: f64,
    pub score_s: f64,
}

/// Combined detection confidence `s = i * e^a`, weighting the action score
/// more heavily than the tIoU score.
pub fn combine_scores(action_score: f64, tiou_score: f64) -> f64 {
    debug_assert!(
        (0.0..=1.0).contains(&tiou_score),
        "tIoU score {tiou_score} outside [0, 1]"
    );
    tiou_score * action_score.exp()
}

impl Detection {
    pub fn new(
        video_id: impl Into<String>,
        class: u32,
        interval: TemporalInterval,
        score_a: f64,
        score_i: f64,
    ) -> Self {
        Detection {
            video_id: video_id.into(),
            class,
            interval,
            score_a,
            score_i,
            score_s: combine_scores(score_a, score_i),
        }
    }
}

/// Total order used by NMS and the evaluators: combined score descending,
/// then earlier start, then lower class id, then earlier end.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score_s
        .total_cmp(&a.score_s)
        .then(a.interval.start().cmp(&b.interval.start()))
        .then(a.class.cmp(&b.class))
        .then(a.interval.end().cmp(&b.interval.end()))
        .then(a.video_id.cmp(&b.video_id))
}

/// Greedy temporal non-maximum suppression returning indices into the
/// input, in keep order: repeatedly keep the highest combined score and
/// discard same-class detections overlapping it above the threshold.
/// Suppression is within one video and one class.
pub fn temporal_nms_indices(detections: &[Detection], threshold: f64) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&threshold), "NMS threshold in [0, 1]");
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]));
    let mut kept: Vec<usize> = Vec::new();
    for candidate in order {
        let c = &detections[candidate];
        let suppressed = kept.iter().any(|&ki| {
            let k = &detections[ki];
            k.class == c.class
                && k.video_id == c.video_id
                && tiou(&k.interval, &c.interval) > threshold
        });
        if !suppressed {
            kept.push(candidate);
        }
    }
    kept
}

/// [`temporal_nms_indices`], materialized.
pub fn temporal_nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    temporal_nms_indices(detections, threshold)
        .into_iter()
        .map(|i| detections[i].clone())
        .collect()
}

/// A detection after boundary refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDetection {
    pub detection: Detection,
    /// True when the decoded interval was degenerate and the raw interval
    /// was kept instead.
    pub refinement_dropped: bool,
}

/// Apply the inverse offset transform to each kept detection, using its own
/// interval as the anchor. Degenerate decodes keep the raw interval.
pub fn refine_boundaries(
    detections: Vec<Detection>,
    regressions: &[OffsetPair],
) -> Result<Vec<RefinedDetection>, DetectError> {
    if detections.len() != regressions.len() {
        return Err(DetectError::LengthMismatch {
            dets: detections.len(),
            regs: regressions.len(),
        });
    }
    Ok(detections
        .into_iter()
        .zip(regressions)
        .map(|(mut det, reg)| match decode_offsets(&det.interval, reg) {
            Ok(refined) => {
                det.interval = refined;
                RefinedDetection {
                    detection: det,
                    refinement_dropped: false,
                }
            }
            Err(_) => RefinedDetection {
                detection: det,
                refinement_dropped: true,
            },
        })
        .collect())
}

/// Serialize detections as JSON lines, one object per detection.
pub fn detections_to_jsonl(detections: &[Detection]) -> String {
    let mut out = String::new();
    for det in detections {
        out.push_str(&serde_json::to_string(det).expect("detection serializes"));
        out.push('\n');
    }
    out
}

/// Parse a detections JSONL document, validating the combined-score
/// invariant on every record.
pub fn detections_from_jsonl(text: &str) -> Result<Vec<Detection>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(line).map_err(|e| DetectError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let expected = combine_scores(det.score_a, det.score_i);
        if det.score_s != expected {
            return Err(DetectError::ScoreMismatch {
                stored: det.score_s,
                expected,
            });
        }
        out.push(det);
    }
    Ok(out)
}
