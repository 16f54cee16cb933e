//! End-to-end orchestration: candidate generation, training-pool assembly,
//! the detection pass, evaluation, and the alpha/n/pooling sweep driver.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ProposalSettings, RunConfig};
use crate::detect::{refine_boundaries, Detection, RefinedDetection};
use crate::eval::{evaluate, ground_truths, EvaluationResult};
use crate::loss::softmax;
use crate::model::{ModelError, Network, TiouHeadMode};
use crate::nn::{ParamSet, PoolMethod, Tensor};
use crate::proposals::{actionness_grouping, label_proposals, ActionnessTrack, ProposalError};
use crate::span_net::{CaptureConfig, SpanNetError};
use crate::synth::{annotations, Dataset, SynthError, VideoData, VideoRecord};
use crate::timeline::{
    augment_proposal, encode_offsets, tiou, AugmentedProposal, TemporalInterval, TimelineError,
};
use crate::train::{
    run_three_step_training, SampleSource, TrainError, TrainOutcome, TrainSample, TrainingPool,
};
use crate::unit_net::ProposalFeatureMaps;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("video {video_id} carries no data payload for this mode")]
    MissingData { video_id: String },
}

/// Slice the per-unit feature matrices of a video down to one augmented
/// proposal's units.
fn unit_feature_slice(
    spatial: &Tensor,
    temporal: &Tensor,
    proposal: &AugmentedProposal,
) -> ProposalFeatureMaps {
    let d = spatial.rows();
    let m = proposal.units.len();
    let mut s = Tensor::zeros(&[d, m]);
    let mut t = Tensor::zeros(&[d, m]);
    for (j, unit) in proposal.units.iter().enumerate() {
        let col = (unit.index - 1) as usize;
        for r in 0..d {
            s.set2(r, j, spatial.at2(r, col));
            t.set2(r, j, temporal.at2(r, col));
        }
    }
    ProposalFeatureMaps {
        spatial: s,
        temporal: t,
    }
}

fn sample_source(video_idx: usize, video: &VideoRecord, proposal: &AugmentedProposal) -> SampleSource {
    match &video.data {
        VideoData::Features { spatial, temporal } => {
            SampleSource::Features(unit_feature_slice(spatial, temporal, proposal))
        }
        VideoData::Pixels { .. } => SampleSource::Pixels {
            video_idx,
            unit_indices: proposal.units.iter().map(|u| u.index).collect(),
        },
    }
}

/// Candidate intervals for one video: actionness grouping, plus seeded
/// random unit-aligned negatives when an RNG is supplied (training pools).
pub fn candidate_proposals(
    video: &VideoRecord,
    settings: &ProposalSettings,
    mut negatives_rng: Option<&mut ChaCha8Rng>,
) -> Vec<TemporalInterval> {
    let scores: Vec<f64> = video.actionness.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let track = ActionnessTrack::new(scores).expect("clamped scores are valid");
    let mut candidates: BTreeSet<TemporalInterval> = actionness_grouping(
        &track,
        &settings.tag_thresholds,
        settings.merge_gap,
        video.unit_length,
    )
    .into_iter()
    .collect();
    if let Some(rng) = negatives_rng.take() {
        let units = video.unit_count() as u32;
        let (lo, hi) = settings.negative_len_units;
        for _ in 0..settings.random_negatives_per_video {
            let len = rng.random_range(lo..=hi).min(units);
            if len == 0 || units < len {
                continue;
            }
            let start_unit = rng.random_range(0..=units - len);
            let start = video.unit_length * start_unit + 1;
            let end = video.unit_length * (start_unit + len);
            candidates
                .insert(TemporalInterval::new(start, end).expect("unit-aligned candidate"));
        }
    }
    candidates.into_iter().collect()
}

/// Build the labeled training pool for a dataset: candidates are augmented,
/// labeled against ground truth, and dropped (with a count) when they cover
/// fewer than `3 * alpha` units.
pub fn build_training_pool(
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<TrainingPool, PipelineError> {
    let mut pool = TrainingPool::default();
    let min_units = 3 * config.model.alpha;
    for (video_idx, video) in dataset.videos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ 0x6e67_6174_6976_6573 ^ (video_idx as u64).wrapping_mul(0x0100_0000_01b3),
        );
        let candidates = candidate_proposals(video, &config.proposals, Some(&mut rng));
        let mut augmented = Vec::new();
        for interval in candidates {
            match augment_proposal(&interval, video.frames, video.unit_length) {
                Ok(aug) => augmented.push(aug),
                Err(TimelineError::NoUnits) => pool.skipped_short += 1,
                Err(e) => return Err(e.into()),
            }
        }
        let labeled = label_proposals(
            augmented,
            &video.instances,
            config.proposals.pos_threshold,
            config.proposals.bg_ceiling,
        );
        for lp in labeled {
            if lp.proposal.unit_count() < min_units {
                pool.skipped_short += 1;
                continue;
            }
            let reg_target = match lp.kind {
                crate::proposals::ProposalKind::Positive => {
                    best_matching_instance(&lp.proposal.core, video)
                        .map(|iv| encode_offsets(&iv, &lp.proposal.core))
                }
                _ => None,
            };
            pool.samples.push(TrainSample {
                kind: lp.kind,
                class: lp.matched_class,
                reg_target,
                source: sample_source(video_idx, video, &lp.proposal),
            });
        }
    }
    Ok(pool)
}

fn best_matching_instance(core: &TemporalInterval, video: &VideoRecord) -> Option<TemporalInterval> {
    let mut best: Option<(f64, TemporalInterval)> = None;
    for inst in &video.instances {
        let overlap = tiou(core, &inst.interval);
        if overlap > best.as_ref().map_or(0.0, |(b, _)| *b) {
            best = Some((overlap, inst.interval));
        }
    }
    best.map(|(_, iv)| iv)
}

/// A trained model plus its optimization history.
pub struct TrainedRun {
    pub network: Network,
    pub params: ParamSet,
    pub outcome: TrainOutcome,
    pub pool_size: usize,
    pub skipped_short: usize,
}

/// Train a fresh network on a dataset under one configuration.
pub fn run_training(
    dataset: &Dataset,
    config: &RunConfig,
    sink: Option<&mut dyn Write>,
    on_phase_end: impl FnMut(crate::train::TrainPhase, &ParamSet),
) -> Result<TrainedRun, PipelineError> {
    let mut params = ParamSet::new();
    let network = Network::new(config.model.clone(), &mut params, config.seed)?;
    let pool = build_training_pool(dataset, config)?;
    let outcome = run_three_step_training(
        &network,
        &mut params,
        &pool,
        dataset,
        &config.train,
        sink,
        on_phase_end,
    )?;
    Ok(TrainedRun {
        network,
        params,
        outcome,
        pool_size: pool.samples.len(),
        skipped_short: pool.skipped_short,
    })
}

/// Bookkeeping from a detection pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectStats {
    pub proposals_scored: usize,
    pub skipped_short: usize,
    pub background_rejected: usize,
    pub suppressed: usize,
    pub refinement_dropped: usize,
}

/// Run the full detection pipeline over a dataset: candidates, features,
/// heads, combined scores, NMS, then boundary refinement.
pub fn detect_dataset(
    network: &Network,
    params: &ParamSet,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<(Vec<Detection>, DetectStats), PipelineError> {
    let mut stats = DetectStats::default();
    let min_units = 3 * network.config.alpha;
    let mut scored: Vec<(Detection, crate::timeline::OffsetPair)> = Vec::new();
    for (video_idx, video) in dataset.videos.iter().enumerate() {
        for interval in candidate_proposals(video, &config.proposals, None) {
            let aug = match augment_proposal(&interval, video.frames, video.unit_length) {
                Ok(aug) => aug,
                Err(TimelineError::NoUnits) => {
                    stats.skipped_short += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if aug.unit_count() < min_units {
                stats.skipped_short += 1;
                continue;
            }
            let source = sample_source(video_idx, video, &aug);
            let inputs = crate::train::materialize_inputs(&source, dataset, None);
            let heads = network.infer_proposal(params, &inputs)?;
            stats.proposals_scored += 1;

            let probs = softmax(&heads.action_logits);
            let background = network.config.num_classes;
            let (class, prob) = probs
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.total_cmp(b))
                .expect("non-empty probabilities");
            if class == background {
                stats.background_rejected += 1;
                continue;
            }
            let tiou_score = match network.config.tiou_head {
                TiouHeadMode::Softmax => softmax(&heads.tiou_logits)[class],
                TiouHeadMode::Sigmoid => {
                    1.0 / (1.0 + (-heads.tiou_logits[class]).exp())
                }
            };
            scored.push((
                Detection::new(&video.video_id, class as u32, aug.core, *prob, tiou_score),
                heads.regression,
            ));
        }
    }
    let detections: Vec<Detection> = scored.iter().map(|(d, _)| d.clone()).collect();
    let kept_indices = crate::detect::temporal_nms_indices(&detections, config.detect.nms_threshold);
    stats.suppressed = detections.len() - kept_indices.len();
    let kept: Vec<Detection> = kept_indices.iter().map(|&i| detections[i].clone()).collect();
    let regs: Vec<crate::timeline::OffsetPair> =
        kept_indices.iter().map(|&i| scored[i].1).collect();
    let refined = refine_boundaries(kept, &regs).expect("lengths match by construction");
    let mut out = Vec::with_capacity(refined.len());
    for RefinedDetection {
        detection,
        refinement_dropped,
    } in refined
    {
        if refinement_dropped {
            stats.refinement_dropped += 1;
        }
        out.push(detection);
    }
    out.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.class.cmp(&b.class))
            .then(b.score_s.total_cmp(&a.score_s))
            .then(a.interval.start().cmp(&b.interval.start()))
            .then(a.interval.end().cmp(&b.interval.end()))
    });
    Ok((out, stats))
}

/// Score detections against a dataset's planted ground truth.
pub fn evaluate_against(
    detections: &[Detection],
    dataset: &Dataset,
    config: &RunConfig,
) -> EvaluationResult {
    let ann = annotations(dataset);
    let gts = ground_truths(&ann);
    evaluate(detections, &gts, &config.eval.thresholds, config.eval.match_rule)
}

/// One sweep cell result. The mAP columns use the 0.1 / 0.3 / 0.5
/// thresholds; infeasible cells carry no numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: usize,
    pub recode_dim: usize,
    pub method: PoolMethod,
    pub status: String,
    pub map_at_01: Option<f64>,
    pub map_at_03: Option<f64>,
    pub map_at_05: Option<f64>,
    pub pool_size: usize,
    pub skipped_short: usize,
}

pub const SWEEP_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];

/// Train and evaluate one configuration cell per grid point. Cells whose
/// pool cannot satisfy the batch composition (for example when alpha
/// demands more units than any proposal covers) are flagged infeasible and
/// skipped rather than failing the sweep.
pub fn run_sweep(
    train_data: &Dataset,
    test_data: &Dataset,
    base: &RunConfig,
    alphas: &[usize],
    recode_dims: &[usize],
    methods: &[PoolMethod],
    mut progress: Option<&mut dyn Write>,
) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &n in recode_dims {
            for &method in methods {
                let mut config = base.clone();
                config.model.alpha = alpha;
                config.model.recode_dim = n;
                config.model.pooling = method;
                config.model.capture = CaptureConfig::compact(alpha, n);
                config.eval.thresholds = SWEEP_THRESHOLDS.to_vec();
                if let Some(w) = progress.as_deref_mut() {
                    writeln!(w, "sweep cell alpha={alpha} n={n} method={method:?}")
                        .map_err(TrainError::Sink)?;
                }
                let row = match run_sweep_cell(train_data, test_data, &config) {
                    Ok((result, pool_size, skipped)) => SweepRow {
                        alpha,
                        recode_dim: n,
                        method,
                        status: "ok".into(),
                        map_at_01: Some(result.map_per_threshold[0]),
                        map_at_03: Some(result.map_per_threshold[1]),
                        map_at_05: Some(result.map_per_threshold[2]),
                        pool_size,
                        skipped_short: skipped,
                    },
                    Err(PipelineError::Train(TrainError::Proposal(
                        ProposalError::MissingKind(kind),
                    ))) => SweepRow {
                        alpha,
                        recode_dim: n,
                        method,
                        status: format!("infeasible: no {kind} proposals survive"),
                        map_at_01: None,
                        map_at_03: None,
                        map_at_05: None,
                        pool_size: 0,
                        skipped_short: 0,
                    },
                    Err(PipelineError::Train(TrainError::EmptyPool))
                    | Err(PipelineError::Model(ModelError::Span(SpanNetError::TooFewUnits {
                        ..
                    }))) => SweepRow {
                        alpha,
                        recode_dim: n,
                        method,
                        status: "infeasible: proposals shorter than 3*alpha units".into(),
                        map_at_01: None,
                        map_at_03: None,
                        map_at_05: None,
                        pool_size: 0,
                        skipped_short: 0,
                    },
                    Err(PipelineError::Train(TrainError::Diverged { phase, iteration })) => {
                        SweepRow {
                            alpha,
                            recode_dim: n,
                            method,
                            status: format!("diverged: {phase:?} iteration {iteration}"),
                            map_at_01: None,
                            map_at_03: None,
                            map_at_05: None,
                            pool_size: 0,
                            skipped_short: 0,
                        }
                    }
                    Err(e) => return Err(e),
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn run_sweep_cell(
    train_data: &Dataset,
    test_data: &Dataset,
    config: &RunConfig,
) -> Result<(EvaluationResult, usize, usize), PipelineError> {
    let trained = run_training(train_data, config, None, |_, _| {})?;
    let (detections, _) = detect_dataset(&trained.network, &trained.params, test_data, config)?;
    let result = evaluate_against(&detections, test_data, config);
    Ok((result, trained.pool_size, trained.skipped_short))
}

/// Render sweep rows as a CSV with one row per (alpha, n, method) cell.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("alpha,n,method,status,mAP@0.1,mAP@0.3,mAP@0.5,pool_size,skipped_short\n");
    for row in rows {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        let method = match row.method {
            PoolMethod::Average => "average",
            PoolMethod::Max => "max",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.alpha,
            row.recode_dim,
            method,
            row.status.replace(',', ";"),
            fmt(row.map_at_01),
            fmt(row.map_at_03),
            fmt(row.map_at_05),
            row.pool_size,
            row.skipped_short,
        ));
    }
    out
}
