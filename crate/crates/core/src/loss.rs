//! The multi-task objective: softmax action loss over K+1 classes, tIoU
//! loss with online hard-example selection, smooth-L1 offset regression,
//! and their weighted composition.
//!
//! Eligibility follows the proposal kinds: the action loss sees positives
//! and backgrounds, the tIoU loss sees positives and confusing proposals,
//! the regression loss sees positives only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposals::ProposalKind;
use crate::timeline::OffsetPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label row {0} is not one-hot")]
    NonOneHotLabel(usize),
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("prediction and target lists differ in length ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
    #[error("logit row {row} has {got} entries, expected {expected}")]
    RowWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("keep fraction {0} outside (0, 1]")]
    KeepFraction(f64),
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[index]`.
pub fn cross_entropy_index(logits: &[f64], index: usize) -> f64 {
    log_sum_exp(logits) - logits[index]
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn one_hot_index(row: &[f64], row_idx: usize) -> Result<usize, LossError> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(LossError::NonOneHotLabel(row_idx));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(LossError::NonOneHotLabel(row_idx));
        }
    }
    hot.ok_or(LossError::NonOneHotLabel(row_idx))
}

/// Mean softmax cross-entropy over one-hot labeled rows.
pub fn action_loss(logits: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<f64, LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            pred: logits.len(),
            target: labels.len(),
        });
    }
    let width = logits[0].len();
    let mut total = 0.0;
    for (i, (row, label)) in logits.iter().zip(labels).enumerate() {
        if row.len() != width || label.len() != width {
            return Err(LossError::RowWidth {
                row: i,
                got: row.len().min(label.len()),
                expected: width,
            });
        }
        total += cross_entropy_index(row, one_hot_index(label, i)?);
    }
    Ok(total / logits.len() as f64)
}

/// Indices of the `ceil(N * keep_fraction)` largest per-sample losses,
/// ties broken toward the lowest index. The result is sorted ascending.
pub fn ohem_select(per_sample: &[f64], keep_fraction: f64) -> Result<Vec<usize>, LossError> {
    if per_sample.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(LossError::KeepFraction(keep_fraction));
    }
    let keep = ((per_sample.len() as f64) * keep_fraction).ceil() as usize;
    let keep = keep.clamp(1, per_sample.len());
    let mut order: Vec<usize> = (0..per_sample.len()).collect();
    // stable sort by descending loss keeps lower indices first on ties
    order.sort_by(|&a, &b| per_sample[b].total_cmp(&per_sample[a]));
    let mut selected: Vec<usize> = order.into_iter().take(keep).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Softmax tIoU loss with hard-example selection: per-sample losses are
/// computed for all rows, and only the hardest `keep_fraction` of them are
/// averaged (the rest contribute no gradient). Returns the averaged loss
/// and the selected row indices.
pub fn tiou_loss_with_ohem(
    logits: &[Vec<f64>],
    labels: &[Vec<f64>],
    keep_fraction: f64,
) -> Result<(f64, Vec<usize>), LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            pred: logits.len(),
            target: labels.len(),
        });
    }
    let per_sample: Vec<f64> = logits
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, label))| Ok(cross_entropy_index(row, one_hot_index(label, i)?)))
        .collect::<Result<_, LossError>>()?;
    let selected = ohem_select(&per_sample, keep_fraction)?;
    let mean = selected.iter().map(|&i| per_sample[i]).sum::<f64>() / selected.len() as f64;
    Ok((mean, selected))
}

/// Mean smooth-L1 penalty over offset pairs:
/// `SL1(d_loc' - d_loc) + SL1(d_len' - d_len)` per sample.
pub fn regression_loss(pred: &[OffsetPair], target: &[OffsetPair]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1(p.d_loc - t.d_loc) + smooth_l1(p.d_len - t.d_len))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Balance terms of the weighted multi-task sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_tiou: f64,
    pub mu_reg: f64,
    pub aux_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_tiou: 1.0,
            mu_reg: 1.0,
            aux_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for v in [self.lambda_tiou, self.mu_reg, self.aux_weight] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::KeepFraction(v));
            }
        }
        Ok(())
    }
}

/// How the principal and auxiliary sums combine into the phase objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMix {
    pub principal_coeff: f64,
    pub aux_coeff: f64,
}

/// Head outputs for one batch member.
#[derive(Debug, Clone)]
pub struct SampleOutputs {
    pub action: Vec<f64>,
    pub tiou: Vec<f64>,
    pub regression: OffsetPair,
}

/// Supervision for one batch member.
#[derive(Debug, Clone)]
pub struct SampleLabel {
    pub kind: ProposalKind,
    /// Matched action class for positives and confusing proposals.
    pub class: Option<u32>,
    /// Ground-truth offsets, positives only.
    pub reg_target: Option<OffsetPair>,
}

/// Flags marking sub-losses whose eligible set was empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    pub action_empty: bool,
    pub tiou_empty: bool,
    pub reg_empty: bool,
}

/// Every term of one batch objective evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchLossReport {
    #[serde(rename = "L_als")]
    pub l_als: f64,
    #[serde(rename = "L_tIoU")]
    pub l_tiou: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    pub principal: f64,
    pub auxiliary: f64,
    pub total: f64,
    pub selected_hard_indices: Vec<usize>,
    pub flags: LossFlags,
}

struct SubLosses {
    l_als: f64,
    l_tiou: f64,
    l_reg: f64,
    hard: Vec<usize>,
    flags: LossFlags,
}

fn sub_losses(
    outputs: &[SampleOutputs],
    labels: &[SampleLabel],
    keep_fraction: f64,
    num_classes: usize,
) -> Result<SubLosses, LossError> {
    let mut flags = LossFlags::default();

    let mut action_terms = Vec::new();
    for (out, label) in outputs.iter().zip(labels) {
        let idx = match (label.kind, label.class) {
            (ProposalKind::Positive, Some(c)) => c as usize,
            (ProposalKind::Background, _) => num_classes,
            _ => continue,
        };
        action_terms.push(cross_entropy_index(&out.action, idx));
    }
    let l_als = if action_terms.is_empty() {
        flags.action_empty = true;
        0.0
    } else {
        action_terms.iter().sum::<f64>() / action_terms.len() as f64
    };

    let mut tiou_terms = Vec::new();
    let mut tiou_batch_rows = Vec::new();
    for (row, (out, label)) in outputs.iter().zip(labels).enumerate() {
        let idx = match (label.kind, label.class) {
            (ProposalKind::Positive | ProposalKind::Confusing, Some(c)) => c as usize,
            _ => continue,
        };
        tiou_terms.push(cross_entropy_index(&out.tiou, idx));
        tiou_batch_rows.push(row);
    }
    let (l_tiou, hard) = if tiou_terms.is_empty() {
        flags.tiou_empty = true;
        (0.0, Vec::new())
    } else {
        let selected = ohem_select(&tiou_terms, keep_fraction)?;
        let mean = selected.iter().map(|&i| tiou_terms[i]).sum::<f64>() / selected.len() as f64;
        (mean, selected.iter().map(|&i| tiou_batch_rows[i]).collect())
    };

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (out, label) in outputs.iter().zip(labels) {
        if label.kind == ProposalKind::Positive {
            if let Some(t) = label.reg_target {
                preds.push(out.regression);
                targets.push(t);
            }
        }
    }
    let l_reg = if preds.is_empty() {
        flags.reg_empty = true;
        0.0
    } else {
        regression_loss(&preds, &targets)?
    };

    Ok(SubLosses {
        l_als,
        l_tiou,
        l_reg,
        hard,
        flags,
    })
}

/// Evaluate the full batch objective.
///
/// `principal = L_als + lambda * L_tIoU + mu * L_reg` over the main head
/// outputs; the auxiliary sum has identical structure over the auxiliary
/// head outputs when present. `mix` states how the two combine into the
/// phase total.
pub fn principal_loss(
    outputs: &[SampleOutputs],
    aux_outputs: Option<&[SampleOutputs]>,
    labels: &[SampleLabel],
    weights: &LossWeights,
    keep_fraction: f64,
    mix: PhaseMix,
) -> Result<BatchLossReport, LossError> {
    if outputs.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            pred: outputs.len(),
            target: labels.len(),
        });
    }
    if outputs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    weights.validate()?;
    let num_classes = outputs[0].tiou.len();
    let main = sub_losses(outputs, labels, keep_fraction, num_classes)?;
    let principal = main.l_als + weights.lambda_tiou * main.l_tiou + weights.mu_reg * main.l_reg;

    let auxiliary = match aux_outputs {
        Some(aux) => {
            if aux.len() != labels.len() {
                return Err(LossError::LengthMismatch {
                    pred: aux.len(),
                    target: labels.len(),
                });
            }
            let a = sub_losses(aux, labels, keep_fraction, num_classes)?;
            a.l_als + weights.lambda_tiou * a.l_tiou + weights.mu_reg * a.l_reg
        }
        None => 0.0,
    };

    Ok(BatchLossReport {
        l_als: main.l_als,
        l_tiou: main.l_tiou,
        l_reg: main.l_reg,
        principal,
        auxiliary,
        total: mix.principal_coeff * principal + mix.aux_coeff * auxiliary,
        selected_hard_indices: main.hard,
        flags: main.flags,
    })
}
