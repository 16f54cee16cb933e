//! The three-step optimization schedule: the unit-level subnet trains first
//! through its auxiliary heads, then the span-level subnet trains with the
//! unit subnet frozen, and finally both fine-tune under an equal-weight mix
//! of the two objectives.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{ohem_select, LossError, LossWeights, PhaseMix};
use crate::model::{ModelError, Network, TiouHeadMode, UnitInputs};
use crate::nn::optim::SgdMomentum;
use crate::nn::{ParamSet, Tape, Var};
use crate::proposals::{sample_minibatch_indices, ProposalError, ProposalKind};
use crate::synth::{Dataset, VideoData};
use crate::timeline::OffsetPair;
use crate::unit_net::{frame_offset_in_unit, FlowStack, ProposalFeatureMaps};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged: non-finite loss at {phase:?} iteration {iteration}")]
    Diverged { phase: TrainPhase, iteration: usize },
    #[error("training pool is empty")]
    EmptyPool,
    #[error("invalid schedule: step-3 weights {w1} + {w2} must sum to 1")]
    BadStepWeights { w1: f64, w2: f64 },
    #[error("history sink: {0}")]
    Sink(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Step1,
    Step2,
    Step3,
}

impl TrainPhase {
    pub const ALL: [TrainPhase; 3] = [TrainPhase::Step1, TrainPhase::Step2, TrainPhase::Step3];

    pub fn index(&self) -> usize {
        match self {
            TrainPhase::Step1 => 0,
            TrainPhase::Step2 => 1,
            TrainPhase::Step3 => 2,
        }
    }
}

/// Phase plus the step-3 mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub phase: TrainPhase,
    /// (weight of the step-1 objective, weight of the step-2 objective).
    pub step3_weights: (f64, f64),
}

impl TrainingSchedule {
    pub fn new(phase: TrainPhase, step3_weights: (f64, f64)) -> Result<Self, TrainError> {
        let (w1, w2) = step3_weights;
        if (w1 + w2 - 1.0).abs() > 1e-12 || w1 < 0.0 || w2 < 0.0 {
            return Err(TrainError::BadStepWeights { w1, w2 });
        }
        Ok(TrainingSchedule {
            phase,
            step3_weights,
        })
    }

    /// Coefficients combining the auxiliary (step-1) and principal (step-2)
    /// objectives into this phase's total.
    pub fn phase_mix(&self, weights: &LossWeights) -> PhaseMix {
        match self.phase {
            TrainPhase::Step1 => PhaseMix {
                principal_coeff: 0.0,
                aux_coeff: weights.aux_weight,
            },
            TrainPhase::Step2 => PhaseMix {
                principal_coeff: 1.0,
                aux_coeff: 0.0,
            },
            TrainPhase::Step3 => PhaseMix {
                principal_coeff: self.step3_weights.1,
                aux_coeff: self.step3_weights.0 * weights.aux_weight,
            },
        }
    }
}

/// Iterations and learning rate for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub iterations: usize,
    pub learning_rate: f64,
}

/// Optimization settings for a full three-step run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weights: LossWeights,
    /// Fraction of tIoU samples kept by hard-example selection.
    pub keep_fraction: f64,
    pub step3_weights: (f64, f64),
    pub phases: [PhasePlan; 3],
}

/// Where one training sample's unit inputs come from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// Precomputed per-unit features (feature mode).
    Features(ProposalFeatureMaps),
    /// Units materialized from pixel data each iteration.
    Pixels {
        video_idx: usize,
        unit_indices: Vec<u32>,
    },
}

/// One pooled training sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub kind: ProposalKind,
    pub class: Option<u32>,
    pub reg_target: Option<OffsetPair>,
    pub source: SampleSource,
}

/// The labeled proposal pool a run trains on.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    pub samples: Vec<TrainSample>,
    /// Proposals dropped because they covered fewer than `3 * alpha` units.
    pub skipped_short: usize,
}

/// One history line: `{phase, iteration, L_als, L_tIoU, L_reg, principal, auxiliary}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub phase: TrainPhase,
    pub iteration: usize,
    #[serde(rename = "L_als")]
    pub l_als: f64,
    #[serde(rename = "L_tIoU")]
    pub l_tiou: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    pub principal: f64,
    pub auxiliary: f64,
}

/// Materialize one sample's unit inputs. Pixel units pick a random frame
/// during training and the center frame otherwise.
pub fn materialize_inputs(
    source: &SampleSource,
    dataset: &Dataset,
    rng: Option<&mut ChaCha8Rng>,
) -> UnitInputs {
    match source {
        SampleSource::Features(maps) => UnitInputs::Features(maps.clone()),
        SampleSource::Pixels {
            video_idx,
            unit_indices,
        } => {
            let video = &dataset.videos[*video_idx];
            let VideoData::Pixels { frames, flows } = &video.data else {
                panic!("pixel sample over a feature-mode video");
            };
            let n_u = video.unit_length;
            let mut rng = rng;
            let mut unit_frames = Vec::with_capacity(unit_indices.len());
            let mut unit_stacks = Vec::with_capacity(unit_indices.len());
            for &unit in unit_indices {
                let first_frame = n_u * (unit - 1); // 0-based frame index
                let offset = frame_offset_in_unit(n_u, rng.as_deref_mut());
                let pick = (first_frame + offset) as usize;
                unit_frames.push(frames[pick.min(frames.len() - 1)].clone());
                // interleave x/y planes for the n_u frame pairs of the unit
                let (h, w) = (flows[0].shape()[1], flows[0].shape()[2]);
                let mut stack = crate::nn::Tensor::zeros(&[2 * n_u as usize, h, w]);
                for m in 0..n_u as usize {
                    let idx = (first_frame as usize + m).min(flows.len() - 1);
                    for y in 0..h {
                        for x in 0..w {
                            stack.set3(2 * m, y, x, flows[idx].at3(0, y, x));
                            stack.set3(2 * m + 1, y, x, flows[idx].at3(1, y, x));
                        }
                    }
                }
                let stack = FlowStack::new(stack, n_u).expect("stack has 2 * n_u planes");
                unit_stacks.push(stack.into_tensor());
            }
            UnitInputs::Pixels {
                frames: unit_frames,
                stacks: unit_stacks,
            }
        }
    }
}

struct BatchHeads {
    main: Option<crate::span_net::HeadVars>,
    aux: Option<crate::span_net::HeadVars>,
}

/// Sub-loss assembly over one batch on the tape: the scalar nodes
/// `(L_als, L_tIoU, L_reg)` and their weighted sum.
struct ObjectiveNodes {
    l_als: Option<Var>,
    l_tiou: Option<Var>,
    l_reg: Option<Var>,
    combined: Var,
}

fn assemble_objective(
    tape: &mut Tape,
    heads: &[crate::span_net::HeadVars],
    batch: &[&TrainSample],
    weights: &LossWeights,
    keep_fraction: f64,
    tiou_mode: TiouHeadMode,
    num_classes: usize,
) -> Result<ObjectiveNodes, TrainError> {
    let mut action_terms = Vec::new();
    for (head, sample) in heads.iter().zip(batch) {
        let idx = match (sample.kind, sample.class) {
            (ProposalKind::Positive, Some(c)) => c as usize,
            (ProposalKind::Background, _) => num_classes,
            _ => continue,
        };
        action_terms.push(tape.log_softmax_nll(head.action, idx));
    }

    let mut tiou_terms = Vec::new();
    for (head, sample) in heads.iter().zip(batch) {
        let Some(class) = sample.class else { continue };
        let node = match (sample.kind, tiou_mode) {
            (ProposalKind::Positive | ProposalKind::Confusing, TiouHeadMode::Softmax) => {
                tape.log_softmax_nll(head.tiou, class as usize)
            }
            (ProposalKind::Positive, TiouHeadMode::Sigmoid) => {
                tape.sigmoid_bce(head.tiou, class as usize, 1.0)
            }
            (ProposalKind::Confusing, TiouHeadMode::Sigmoid) => {
                tape.sigmoid_bce(head.tiou, class as usize, 0.0)
            }
            _ => continue,
        };
        tiou_terms.push(node);
    }

    let mut reg_terms = Vec::new();
    for (head, sample) in heads.iter().zip(batch) {
        if sample.kind != ProposalKind::Positive {
            continue;
        }
        let Some(target) = sample.reg_target else { continue };
        reg_terms.push(tape.smooth_l1(head.reg, &[target.d_loc, target.d_len]));
    }

    let l_als = (!action_terms.is_empty()).then(|| tape.mean(&action_terms));
    let l_tiou = if tiou_terms.is_empty() {
        None
    } else {
        let values: Vec<f64> = tiou_terms.iter().map(|&v| tape.value(v).item()).collect();
        let selected = ohem_select(&values, keep_fraction)?;
        let picked: Vec<Var> = selected.iter().map(|&i| tiou_terms[i]).collect();
        Some(tape.mean(&picked))
    };
    let l_reg = (!reg_terms.is_empty()).then(|| tape.mean(&reg_terms));

    let mut combo = Vec::new();
    if let Some(v) = l_als {
        combo.push((1.0, v));
    }
    if let Some(v) = l_tiou {
        combo.push((weights.lambda_tiou, v));
    }
    if let Some(v) = l_reg {
        combo.push((weights.mu_reg, v));
    }
    let combined = tape.weighted_sum(&combo);
    Ok(ObjectiveNodes {
        l_als,
        l_tiou,
        l_reg,
        combined,
    })
}

fn scalar(tape: &Tape, v: Option<Var>) -> f64 {
    v.map(|v| tape.value(v).item()).unwrap_or(0.0)
}

/// Run one optimization phase over the pool.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    network: &Network,
    params: &mut ParamSet,
    pool: &TrainingPool,
    dataset: &Dataset,
    settings: &TrainSettings,
    schedule: TrainingSchedule,
    plan: PhasePlan,
    trainable: &[crate::nn::ParamId],
    history: &mut Vec<HistoryRecord>,
    sink: &mut Option<&mut dyn Write>,
) -> Result<(), TrainError> {
    let phase = schedule.phase;
    let mix = schedule.phase_mix(&settings.weights);
    let kinds: Vec<ProposalKind> = pool.samples.iter().map(|s| s.kind).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(settings.seed ^ (0x517c_c1b7_2722_0a95 + phase.index() as u64));
    let mut optimizer = SgdMomentum::new(params, plan.learning_rate, settings.momentum);
    let num_classes = network.config.num_classes;

    for iteration in 0..plan.iterations {
        let (indices, _) = sample_minibatch_indices(&kinds, settings.batch_size, &mut rng)?;
        let batch: Vec<&TrainSample> = indices.iter().map(|&i| &pool.samples[i]).collect();

        let mut tape = Tape::new();
        let mut main_heads = Vec::new();
        let mut aux_heads = Vec::new();
        for sample in &batch {
            let inputs = materialize_inputs(&sample.source, dataset, Some(&mut rng));
            let (v_s, v_t) = network.feature_maps(&mut tape, params, &inputs)?;
            let heads = BatchHeads {
                main: (mix.principal_coeff != 0.0)
                    .then(|| network.forward_span(&mut tape, params, v_s, v_t))
                    .transpose()?,
                aux: (mix.aux_coeff != 0.0)
                    .then(|| network.forward_aux(&mut tape, params, v_s, v_t))
                    .transpose()?,
            };
            if let Some(h) = heads.main {
                main_heads.push(h);
            }
            if let Some(h) = heads.aux {
                aux_heads.push(h);
            }
        }

        let main_objective = (!main_heads.is_empty())
            .then(|| {
                assemble_objective(
                    &mut tape,
                    &main_heads,
                    &batch,
                    &settings.weights,
                    settings.keep_fraction,
                    network.config.tiou_head,
                    num_classes,
                )
            })
            .transpose()?;
        let aux_objective = (!aux_heads.is_empty())
            .then(|| {
                assemble_objective(
                    &mut tape,
                    &aux_heads,
                    &batch,
                    &settings.weights,
                    settings.keep_fraction,
                    network.config.tiou_head,
                    num_classes,
                )
            })
            .transpose()?;

        let mut total_terms = Vec::new();
        if let Some(obj) = &main_objective {
            total_terms.push((mix.principal_coeff, obj.combined));
        }
        if let Some(obj) = &aux_objective {
            total_terms.push((mix.aux_coeff, obj.combined));
        }
        let total = tape.weighted_sum(&total_terms);
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(TrainError::Diverged { phase, iteration });
        }

        let grads = tape.backward(total, params);
        optimizer.step(params, &grads, trainable);

        let record = HistoryRecord {
            phase,
            iteration,
            l_als: scalar(&tape, main_objective.as_ref().and_then(|o| o.l_als)),
            l_tiou: scalar(&tape, main_objective.as_ref().and_then(|o| o.l_tiou)),
            l_reg: scalar(&tape, main_objective.as_ref().and_then(|o| o.l_reg)),
            principal: scalar(&tape, main_objective.as_ref().map(|o| o.combined)),
            auxiliary: scalar(&tape, aux_objective.as_ref().map(|o| o.combined)),
        };
        if let Some(out) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        history.push(record);
    }
    Ok(())
}

/// Outcome of a three-step run: per-phase boundaries plus the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    /// History index where each phase starts.
    pub phase_starts: [usize; 3],
}

/// The three-step schedule: step 1 trains the unit subnet and its
/// auxiliary heads alone; step 2 freezes them and trains the span subnet;
/// step 3 fine-tunes everything under the 0.5/0.5 objective mix.
pub fn run_three_step_training(
    network: &Network,
    params: &mut ParamSet,
    pool: &TrainingPool,
    dataset: &Dataset,
    settings: &TrainSettings,
    mut sink: Option<&mut dyn Write>,
    mut on_phase_end: impl FnMut(TrainPhase, &ParamSet),
) -> Result<TrainOutcome, TrainError> {
    if pool.samples.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let unit_ids = network.unit_param_ids();
    let span_ids = network.span_param_ids();
    let all_ids = network.all_param_ids();

    let mut history = Vec::new();
    let mut phase_starts = [0usize; 3];
    for phase in TrainPhase::ALL {
        phase_starts[phase.index()] = history.len();
        let schedule = TrainingSchedule::new(phase, settings.step3_weights)?;
        let trainable = match phase {
            TrainPhase::Step1 => &unit_ids,
            TrainPhase::Step2 => &span_ids,
            TrainPhase::Step3 => &all_ids,
        };
        run_phase(
            network,
            params,
            pool,
            dataset,
            settings,
            schedule,
            settings.phases[phase.index()],
            trainable,
            &mut history,
            &mut sink,
        )?;
        on_phase_end(phase, params);
    }
    Ok(TrainOutcome {
        history,
        phase_starts,
    })
}
