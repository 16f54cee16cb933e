//! Frame and unit arithmetic: intervals, unit partitioning, proposal
//! augmentation, and the center/length offset transforms.
//!
//! Frames are 1-based and inclusive on both ends throughout the crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("invalid interval [{start}, {end}]: need 1 <= start <= end")]
    InvalidInterval { start: i64, end: i64 },
    #[error("unit length must be at least 1")]
    InvalidUnitLength,
    #[error("video of {total_frames} frames is shorter than one unit ({unit_length})")]
    EmptyVideo { total_frames: u32, unit_length: u32 },
    #[error("proposal [{start}, {end}] exceeds video of {video_frames} frames")]
    ProposalOutOfBounds {
        start: u32,
        end: u32,
        video_frames: u32,
    },
    #[error("augmented proposal overlaps no complete unit")]
    NoUnits,
    #[error("decoded detection is degenerate (length {length:.6})")]
    DegenerateDetection { length: f64 },
}

#[derive(Serialize, Deserialize, Clone, Copy)]
struct IntervalRepr {
    start: u32,
    end: u32,
}

/// A closed frame interval `[start, end]`, 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub struct TemporalInterval {
    start: u32,
    end: u32,
}

impl TryFrom<IntervalRepr> for TemporalInterval {
    type Error = TimelineError;
    fn try_from(raw: IntervalRepr) -> Result<Self, TimelineError> {
        TemporalInterval::new(raw.start, raw.end)
    }
}

impl From<TemporalInterval> for IntervalRepr {
    fn from(iv: TemporalInterval) -> Self {
        IntervalRepr {
            start: iv.start,
            end: iv.end,
        }
    }
}

impl TemporalInterval {
    pub fn new(start: u32, end: u32) -> Result<Self, TimelineError> {
        if start < 1 || end < start {
            return Err(TimelineError::InvalidInterval {
                start: start as i64,
                end: end as i64,
            });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn end(&self) -> u32 {
        self.end
    }

    /// Inclusive frame count.
    pub fn duration(&self) -> u32 {
        self.end - self.start + 1
    }

    /// Center frame coordinate (half-integral for even durations).
    pub fn center(&self) -> f64 {
        (self.start as f64 + self.end as f64) / 2.0
    }

    pub fn contains(&self, other: &TemporalInterval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// Number of frames shared with `other`.
    pub fn intersection_frames(&self, other: &TemporalInterval) -> u32 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi < lo {
            0
        } else {
            hi - lo + 1
        }
    }
}

/// Temporal intersection-over-union with inclusive frame counts.
/// Returns 0 for disjoint intervals and 1 exactly when they are identical.
pub fn tiou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter = a.intersection_frames(b) as f64;
    let union = a.duration() as f64 + b.duration() as f64 - inter;
    inter / union
}

/// A fixed block of consecutive frames, the pipeline's atomic input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    /// 1-based unit index.
    pub index: u32,
    pub frames: TemporalInterval,
}

/// Split a video into consecutive units of exactly `unit_length` frames.
/// Trailing frames that do not fill a unit are dropped.
pub fn partition_units(total_frames: u32, unit_length: u32) -> Result<Vec<Unit>, TimelineError> {
    if unit_length < 1 {
        return Err(TimelineError::InvalidUnitLength);
    }
    if total_frames < unit_length {
        return Err(TimelineError::EmptyVideo {
            total_frames,
            unit_length,
        });
    }
    let count = total_frames / unit_length;
    (1..=count)
        .map(|index| {
            let start = unit_length * (index - 1) + 1;
            let end = unit_length * index;
            Ok(Unit {
                index,
                frames: TemporalInterval::new(start, end)?,
            })
        })
        .collect()
}

/// A proposal together with its context-extended span and the units that
/// span covers.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedProposal {
    pub core: TemporalInterval,
    pub extended: TemporalInterval,
    /// Units overlapping the extended span, in temporal order.
    pub units: Vec<Unit>,
    /// True when the extension hit a video boundary and was clamped.
    pub clamped: bool,
}

impl AugmentedProposal {
    pub fn unit_count(&self) -> usize {
        self.units.len()
    }
}

/// Extend a proposal `[s, e]` of duration `d` to `[s - d + 1, e + d - 1]`,
/// clamped to the video. The units attached to the result are every
/// complete unit the extended span overlaps.
pub fn augment_proposal(
    p: &TemporalInterval,
    video_frames: u32,
    unit_length: u32,
) -> Result<AugmentedProposal, TimelineError> {
    if unit_length < 1 {
        return Err(TimelineError::InvalidUnitLength);
    }
    if p.end() > video_frames {
        return Err(TimelineError::ProposalOutOfBounds {
            start: p.start(),
            end: p.end(),
            video_frames,
        });
    }
    let d = p.duration() as i64;
    let raw_start = p.start() as i64 - d + 1;
    let raw_end = p.end() as i64 + d - 1;
    let start = raw_start.max(1) as u32;
    let end = raw_end.min(video_frames as i64) as u32;
    let clamped = raw_start < 1 || raw_end > video_frames as i64;
    let extended = TemporalInterval::new(start, end)?;

    let total_units = video_frames / unit_length;
    let first = (start - 1) / unit_length + 1;
    let last = ((end - 1) / unit_length + 1).min(total_units);
    if total_units == 0 || first > last {
        return Err(TimelineError::NoUnits);
    }
    let units = (first..=last)
        .map(|index| {
            let s = unit_length * (index - 1) + 1;
            let e = unit_length * index;
            Ok(Unit {
                index,
                frames: TemporalInterval::new(s, e)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(AugmentedProposal {
        core: *p,
        extended,
        units,
        clamped,
    })
}

/// Relative displacement of a target interval from an anchor:
/// a dimensionless center shift and a log length ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetPair {
    pub d_loc: f64,
    pub d_len: f64,
}

impl OffsetPair {
    pub const ZERO: OffsetPair = OffsetPair {
        d_loc: 0.0,
        d_len: 0.0,
    };
}

/// Offset transform in center/length coordinates:
/// `d_loc = (loc_target - loc_anchor) / len_anchor`, `d_len = ln(len_target / len_anchor)`.
pub fn encode_center_len(target: (f64, f64), anchor: (f64, f64)) -> OffsetPair {
    let (loc_t, len_t) = target;
    let (loc_a, len_a) = anchor;
    OffsetPair {
        d_loc: (loc_t - loc_a) / len_a,
        d_len: (len_t / len_a).ln(),
    }
}

/// Inverse of [`encode_center_len`]:
/// `loc' = loc + d_loc * len`, `len' = len * exp(d_len)`.
pub fn decode_center_len(anchor: (f64, f64), pred: &OffsetPair) -> (f64, f64) {
    let (loc, len) = anchor;
    (loc + pred.d_loc * len, len * pred.d_len.exp())
}

/// Ground-truth offsets of `gt` relative to `anchor`.
pub fn encode_offsets(gt: &TemporalInterval, anchor: &TemporalInterval) -> OffsetPair {
    encode_center_len(
        (gt.center(), gt.duration() as f64),
        (anchor.center(), anchor.duration() as f64),
    )
}

/// Apply predicted offsets to an anchor and convert back to an integer
/// interval: `start = round(loc' - (len' - 1) / 2)`, `end = start + round(len') - 1`.
/// Lengths that round below one frame, or starts before frame 1, are
/// degenerate detections.
pub fn decode_offsets(
    anchor: &TemporalInterval,
    pred: &OffsetPair,
) -> Result<TemporalInterval, TimelineError> {
    let (loc, len) = decode_center_len((anchor.center(), anchor.duration() as f64), pred);
    let rounded_len = len.round();
    if !rounded_len.is_finite() || rounded_len < 1.0 {
        return Err(TimelineError::DegenerateDetection { length: len });
    }
    let start = (loc - (len - 1.0) / 2.0).round();
    if !start.is_finite() || start < 1.0 {
        return Err(TimelineError::DegenerateDetection { length: len });
    }
    let start = start as u32;
    let end = start + rounded_len as u32 - 1;
    TemporalInterval::new(start, end)
}
