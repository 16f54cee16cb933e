//! Run configuration, named presets, and the reproducibility manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::MatchRule;
use crate::fingerprint::fnv1a64;
use crate::loss::LossWeights;
use crate::model::{ModelConfig, TiouHeadMode};
use crate::nn::PoolMethod;
use crate::span_net::CaptureConfig;
use crate::synth::{DataMode, SyntheticConfig};
use crate::train::{PhasePlan, TrainSettings};
use crate::unit_net::BackboneConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("unknown preset {0}; available: tiny5, pixel3")]
    UnknownPreset(String),
}

/// Proposal generation and labeling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSettings {
    /// Actionness grouping thresholds.
    pub tag_thresholds: Vec<f64>,
    /// Low units bridged inside a run.
    pub merge_gap: usize,
    pub pos_threshold: f64,
    pub bg_ceiling: f64,
    /// Extra random unit-aligned candidates per video for training pools.
    pub random_negatives_per_video: usize,
    /// Length range of those candidates, in units.
    pub negative_len_units: (u32, u32),
}

impl Default for ProposalSettings {
    fn default() -> Self {
        ProposalSettings {
            tag_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            merge_gap: 1,
            pos_threshold: 0.7,
            bg_ceiling: 0.1,
            random_negatives_per_video: 6,
            negative_len_units: (3, 14),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSettings {
    pub nms_threshold: f64,
}

impl Default for DetectSettings {
    fn default() -> Self {
        DetectSettings { nms_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub match_rule: MatchRule,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            thresholds: vec![0.1, 0.3, 0.5, 0.7],
            match_rule: MatchRule::Strict,
        }
    }
}

/// Everything one run needs: architecture, proposal policy, optimization,
/// detection, and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub proposals: ProposalSettings,
    pub train: TrainSettings,
    pub detect: DetectSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Stable hash of the canonical JSON encoding; checkpoints carry it.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// The reference-scale architecture: 2048-dim unit features, nine
    /// segments per stage, 129-dim recoding, the full residual capture
    /// stack. Training schedules at this scale are not desk-sized; this
    /// config exists for shape conformance and as the sweep baseline.
    pub fn reference() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                num_classes: 20,
                alpha: 9,
                recode_dim: 129,
                pooling: PoolMethod::Average,
                tiou_head: TiouHeadMode::Softmax,
                share_streams: false,
                capture: CaptureConfig::resnet18(),
                backbone: BackboneConfig::feature_passthrough(2048, 6),
            },
            proposals: ProposalSettings::default(),
            train: TrainSettings {
                seed: 0,
                batch_size: 128,
                momentum: 0.9,
                weights: LossWeights::default(),
                keep_fraction: 1.0 / 6.0,
                step3_weights: (0.5, 0.5),
                phases: [
                    PhasePlan {
                        iterations: 0,
                        learning_rate: 0.001,
                    },
                    PhasePlan {
                        iterations: 0,
                        learning_rate: 0.001,
                    },
                    PhasePlan {
                        iterations: 0,
                        learning_rate: 0.0005,
                    },
                ],
            },
            detect: DetectSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// A named, self-contained run recipe: the run configuration plus the
/// synthetic train and test splits it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetBundle {
    pub name: String,
    pub run: RunConfig,
    pub train_data: SyntheticConfig,
    pub test_data: SyntheticConfig,
}

/// The easy feature-mode preset: 5 classes, 200 train / 50 test videos,
/// low noise.
fn tiny5(seed: u64) -> PresetBundle {
    let data = |num_videos: usize, split_salt: u64| SyntheticConfig {
        seed: seed.wrapping_add(split_salt),
        pattern_seed: seed,
        num_videos,
        frames_per_video: 192,
        unit_length: 4,
        num_classes: 5,
        instances_per_video: 2,
        duration_range: (20, 48),
        mode: DataMode::Feature { dim: 16 },
        noise: 0.05,
        fps: 24.0,
    };
    let run = RunConfig {
        seed,
        model: ModelConfig {
            num_classes: 5,
            alpha: 3,
            recode_dim: 17,
            pooling: PoolMethod::Average,
            tiou_head: TiouHeadMode::Softmax,
            share_streams: false,
            capture: CaptureConfig::compact(3, 17),
            backbone: BackboneConfig::feature_passthrough(16, 4),
        },
        proposals: ProposalSettings::default(),
        train: TrainSettings {
            seed,
            batch_size: 128,
            momentum: 0.9,
            weights: LossWeights::default(),
            keep_fraction: 1.0 / 6.0,
            step3_weights: (0.5, 0.5),
            phases: [
                PhasePlan {
                    iterations: 40,
                    learning_rate: 0.3,
                },
                PhasePlan {
                    iterations: 240,
                    learning_rate: 0.2,
                },
                PhasePlan {
                    iterations: 80,
                    learning_rate: 0.05,
                },
            ],
        },
        detect: DetectSettings::default(),
        eval: EvalSettings::default(),
    };
    PresetBundle {
        name: "tiny5".into(),
        run,
        train_data: data(200, 0),
        test_data: data(50, 1),
    }
}

/// A minimal pixel-mode preset that exercises the pixel backbones end to
/// end; sized for smoke runs, not accuracy.
fn pixel3(seed: u64) -> PresetBundle {
    let data = |num_videos: usize, split_salt: u64| SyntheticConfig {
        seed: seed.wrapping_add(split_salt),
        pattern_seed: seed,
        num_videos,
        frames_per_video: 96,
        unit_length: 4,
        num_classes: 3,
        instances_per_video: 1,
        duration_range: (16, 32),
        mode: DataMode::Pixel {
            height: 16,
            width: 16,
        },
        noise: 0.02,
        fps: 24.0,
    };
    let run = RunConfig {
        seed,
        model: ModelConfig {
            num_classes: 3,
            alpha: 3,
            recode_dim: 17,
            pooling: PoolMethod::Average,
            tiou_head: TiouHeadMode::Softmax,
            share_streams: false,
            capture: CaptureConfig::compact(3, 17),
            backbone: BackboneConfig::pixel(16, vec![8, 16], (16, 16), 4),
        },
        proposals: ProposalSettings {
            random_negatives_per_video: 8,
            negative_len_units: (3, 10),
            ..ProposalSettings::default()
        },
        train: TrainSettings {
            seed,
            batch_size: 16,
            momentum: 0.9,
            weights: LossWeights::default(),
            keep_fraction: 1.0 / 6.0,
            step3_weights: (0.5, 0.5),
            phases: [
                PhasePlan {
                    iterations: 4,
                    learning_rate: 0.05,
                },
                PhasePlan {
                    iterations: 6,
                    learning_rate: 0.05,
                },
                PhasePlan {
                    iterations: 3,
                    learning_rate: 0.02,
                },
            ],
        },
        detect: DetectSettings::default(),
        eval: EvalSettings::default(),
    };
    PresetBundle {
        name: "pixel3".into(),
        run,
        train_data: data(6, 0),
        test_data: data(3, 1),
    }
}

/// Look up a preset by name with the given master seed.
pub fn preset(name: &str, seed: u64) -> Result<PresetBundle, ConfigError> {
    match name {
        "tiny5" => Ok(tiny5(seed)),
        "pixel3" => Ok(pixel3(seed)),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Everything needed to reproduce a run byte-for-byte with the same build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub config_hash: u64,
    pub dataset_fingerprint: u64,
}

impl RunManifest {
    pub fn new(config: RunConfig, dataset_fingerprint: u64) -> Self {
        let config_hash = config.config_hash();
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_hash,
            dataset_fingerprint,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ConfigError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
        .map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let bundle = preset("tiny5", 7).unwrap();
        let h1 = bundle.run.config_hash();
        let h2 = bundle.run.config_hash();
        assert_eq!(h1, h2);
        let mut changed = bundle.run.clone();
        changed.model.alpha = 9;
        assert_ne!(h1, changed.config_hash());
    }

    #[test]
    fn presets_resolve_and_record_their_knobs() {
        let bundle = preset("tiny5", 3).unwrap();
        assert_eq!(bundle.train_data.num_videos, 200);
        assert_eq!(bundle.test_data.num_videos, 50);
        assert_eq!(bundle.run.model.alpha, 3);
        assert_eq!(bundle.run.train.batch_size, 128);
        assert!(preset("nope", 0).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let bundle = preset("pixel3", 5).unwrap();
        let manifest = RunManifest::new(bundle.run.clone(), 0x1234);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.config_hash, bundle.run.config_hash());
    }

    #[test]
    fn reference_config_matches_the_published_scale() {
        let cfg = RunConfig::reference();
        assert_eq!(cfg.model.alpha, 9);
        assert_eq!(cfg.model.recode_dim, 129);
        assert_eq!(cfg.model.backbone.feature_dim, 2048);
        assert_eq!(cfg.model.capture.output_dim(9, 129).unwrap(), 2048);
        assert_eq!(cfg.detect.nms_threshold, 0.2);
    }
}
