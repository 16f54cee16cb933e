//! Proposal generation from actionness scores, labeling against ground
//! truth, and mini-batch composition at the fixed 1:6:1 ratio.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::{tiou, AugmentedProposal, TemporalInterval};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("batch size {0} is not divisible by 8")]
    BatchSize(usize),
    #[error("proposal pool contains no {0} proposals")]
    MissingKind(ProposalKind),
    #[error("actionness track of {got} scores does not match {expected} units")]
    TrackLength { got: usize, expected: usize },
    #[error("actionness score {0} outside [0, 1]")]
    ScoreRange(f64),
}

/// Per-unit "any action vs background" scores for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionnessTrack {
    scores: Vec<f64>,
}

impl ActionnessTrack {
    pub fn new(scores: Vec<f64>) -> Result<Self, ProposalError> {
        for &s in &scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(ProposalError::ScoreRange(s));
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Grouping of high-actionness unit runs into candidate intervals.
///
/// For each threshold, maximal runs of units scoring at or above it are
/// extracted; runs separated by at most `merge_gap` low units merge. The
/// union over thresholds is deduplicated by exact interval equality and
/// returned in frame coordinates sorted by (start, end).
pub fn actionness_grouping(
    track: &ActionnessTrack,
    thresholds: &[f64],
    merge_gap: usize,
    unit_length: u32,
) -> Vec<TemporalInterval> {
    assert!(!thresholds.is_empty(), "thresholds must be non-empty");
    for &t in thresholds {
        assert!(
            t > 0.0 && t < 1.0,
            "threshold {t} outside the open interval (0, 1)"
        );
    }
    let mut intervals = BTreeSet::new();
    for &tau in thresholds {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut current: Option<(usize, usize)> = None;
        for (i, &s) in track.scores.iter().enumerate() {
            if s >= tau {
                current = match current {
                    Some((start, _)) => Some((start, i)),
                    None => Some((i, i)),
                };
            } else if let Some(run) = current.take() {
                runs.push(run);
            }
        }
        if let Some(run) = current {
            runs.push(run);
        }
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for run in runs {
            match merged.last_mut() {
                Some(prev) if run.0 - prev.1 - 1 <= merge_gap => prev.1 = run.1,
                _ => merged.push(run),
            }
        }
        for (first, last) in merged {
            let start = unit_length * first as u32 + 1;
            let end = unit_length * (last as u32 + 1);
            intervals.insert(
                TemporalInterval::new(start, end).expect("unit-aligned interval is valid"),
            );
        }
    }
    intervals.into_iter().collect()
}

/// One labeled action instance from an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub class: u32,
    #[serde(flatten)]
    pub interval: TemporalInterval,
}

/// Annotations for a single video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotations {
    pub video_id: String,
    pub frames: u32,
    pub fps: f64,
    pub instances: Vec<ActionInstance>,
}

/// Top-level annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub videos: Vec<VideoAnnotations>,
}

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Positive,
    Confusing,
    Background,
}

impl std::fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProposalKind::Positive => write!(f, "positive"),
            ProposalKind::Confusing => write!(f, "confusing"),
            ProposalKind::Background => write!(f, "background"),
        }
    }
}

/// A proposal labeled against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProposal {
    pub proposal: AugmentedProposal,
    pub kind: ProposalKind,
    /// Class of the best-overlapping instance. Always set for positives,
    /// set for confusing proposals with any overlap, never for background.
    pub matched_class: Option<u32>,
    pub best_tiou: f64,
}

/// Label each proposal by its best tIoU over the ground-truth instances:
/// positive at or above `pos_thr`, background at or below `bg_ceiling`,
/// confusing in between.
pub fn label_proposals(
    proposals: Vec<AugmentedProposal>,
    ground_truths: &[ActionInstance],
    pos_thr: f64,
    bg_ceiling: f64,
) -> Vec<LabeledProposal> {
    assert!(
        bg_ceiling >= 0.0 && bg_ceiling < pos_thr && pos_thr <= 1.0,
        "need 0 <= bg_ceiling < pos_thr <= 1"
    );
    proposals
        .into_iter()
        .map(|proposal| {
            let mut best_tiou = 0.0;
            let mut best_class = None;
            for inst in ground_truths {
                let t = tiou(&proposal.core, &inst.interval);
                if t > best_tiou {
                    best_tiou = t;
                    best_class = Some(inst.class);
                }
            }
            let kind = if best_tiou >= pos_thr {
                ProposalKind::Positive
            } else if best_tiou <= bg_ceiling {
                ProposalKind::Background
            } else {
                ProposalKind::Confusing
            };
            let matched_class = match kind {
                ProposalKind::Background => None,
                _ => best_class,
            };
            LabeledProposal {
                proposal,
                kind,
                matched_class,
                best_tiou,
            }
        })
        .collect()
}

/// A training batch with the positive : confusing : background counts
/// pinned at 1:6:1.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub members: Vec<LabeledProposal>,
    pub counts: (usize, usize, usize),
}

fn sample_kind(
    kinds: &[ProposalKind],
    kind: ProposalKind,
    need: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, ProposalError> {
    let candidates: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == kind)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(ProposalError::MissingKind(kind));
    }
    if candidates.len() >= need {
        // without replacement via a partial Fisher-Yates shuffle
        let mut indices = candidates;
        for i in 0..need {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(need);
        Ok(indices)
    } else {
        Ok((0..need)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect())
    }
}

/// Pool indices of one mini-batch draw plus the (positive, confusing,
/// background) counts.
pub type MiniBatchIndices = (Vec<usize>, (usize, usize, usize));

/// Index-level mini-batch draw at the 1:6:1 ratio over a pool described by
/// its kinds. Positives come first, then confusing, then background.
pub fn sample_minibatch_indices(
    kinds: &[ProposalKind],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatchIndices, ProposalError> {
    if batch_size == 0 || !batch_size.is_multiple_of(8) {
        return Err(ProposalError::BatchSize(batch_size));
    }
    let counts = (batch_size / 8, 6 * batch_size / 8, batch_size / 8);
    let mut indices = Vec::with_capacity(batch_size);
    for (kind, need) in [
        (ProposalKind::Positive, counts.0),
        (ProposalKind::Confusing, counts.1),
        (ProposalKind::Background, counts.2),
    ] {
        indices.extend(sample_kind(kinds, kind, need, rng)?);
    }
    Ok((indices, counts))
}

/// Draw a mini-batch at exact 1:6:1 composition. Scarce kinds are sampled
/// uniformly with replacement so the ratio always holds.
pub fn sample_minibatch(
    pool: &[LabeledProposal],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatch, ProposalError> {
    let kinds: Vec<ProposalKind> = pool.iter().map(|p| p.kind).collect();
    let (indices, counts) = sample_minibatch_indices(&kinds, batch_size, rng)?;
    Ok(MiniBatch {
        members: indices.into_iter().map(|i| pool[i].clone()).collect(),
        counts,
    })
}
