//! Desk-scale temporal action localization: proposal generation, two-stream
//! feature modeling, multi-task training, and score-fused detection with
//! mAP evaluation, exercised end to end on synthetic videos with planted
//! action instances.

pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod eval;
pub mod fingerprint;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod proposals;
pub mod span_net;
pub mod synth;
pub mod timeline;
pub mod train;
pub mod unit_net;

pub use config::{preset, PresetBundle, RunConfig, RunManifest};
pub use detect::{combine_scores, temporal_nms, Detection};
pub use eval::{evaluate, EvaluationResult, MatchRule};
pub use model::{ModelConfig, Network, TiouHeadMode};
pub use proposals::{
    actionness_grouping, label_proposals, sample_minibatch, LabeledProposal, ProposalKind,
};
pub use timeline::{
    augment_proposal, decode_offsets, encode_offsets, partition_units, tiou, AugmentedProposal,
    OffsetPair, TemporalInterval,
};
