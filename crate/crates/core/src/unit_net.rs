//! Short-range modeling: per-unit spatial features from an RGB frame and
//! temporal features from an optical-flow stack, concatenated into
//! per-proposal feature maps, plus the auxiliary supervision heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{init, ParamId, ParamSet, PoolMethod, Tape, Tensor, Var};
use crate::span_net::HeadVars;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitNetError {
    #[error("invalid backbone configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("proposal with {units} units is too short for auxiliary pooling (need 3)")]
    ProposalTooShort { units: usize },
    #[error("expected one input per unit: {units} units, {frames} frames, {stacks} flow stacks")]
    UnitCountMismatch {
        units: usize,
        frames: usize,
        stacks: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    Pixel,
    FeaturePassthrough,
}

/// Configuration of the unit-level feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    /// Output feature dimension D shared by both streams.
    pub feature_dim: usize,
    /// Channel widths of the strided convolution stages (pixel mode).
    pub conv_widths: Vec<usize>,
    /// Input resolution (height, width) in pixel mode.
    pub resolution: (usize, usize),
    /// Frames per unit.
    pub unit_length: u32,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), UnitNetError> {
        if self.feature_dim < 8 {
            return Err(UnitNetError::InvalidConfig(format!(
                "feature dim {} below minimum 8",
                self.feature_dim
            )));
        }
        if self.unit_length < 1 {
            return Err(UnitNetError::InvalidConfig("unit length must be >= 1".into()));
        }
        if self.mode == BackboneMode::Pixel {
            if self.resolution.0 < 8 || self.resolution.1 < 8 {
                return Err(UnitNetError::InvalidConfig(format!(
                    "pixel resolution {:?} below minimum 8x8",
                    self.resolution
                )));
            }
            if self.conv_widths.is_empty() {
                return Err(UnitNetError::InvalidConfig(
                    "pixel mode needs at least one conv stage".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn feature_passthrough(feature_dim: usize, unit_length: u32) -> Self {
        BackboneConfig {
            mode: BackboneMode::FeaturePassthrough,
            feature_dim,
            conv_widths: Vec::new(),
            resolution: (0, 0),
            unit_length,
        }
    }

    pub fn pixel(
        feature_dim: usize,
        conv_widths: Vec<usize>,
        resolution: (usize, usize),
        unit_length: u32,
    ) -> Self {
        BackboneConfig {
            mode: BackboneMode::Pixel,
            feature_dim,
            conv_widths,
            resolution,
            unit_length,
        }
    }
}

/// Stack of per-frame optical flow fields for one unit, alternating
/// horizontal and vertical planes: shape `[2 * unit_length, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack(Tensor);

impl FlowStack {
    pub fn new(planes: Tensor, unit_length: u32) -> Result<Self, UnitNetError> {
        let expected = 2 * unit_length as usize;
        if planes.shape().len() != 3 || planes.shape()[0] != expected {
            return Err(UnitNetError::ShapeMismatch {
                expected: vec![expected],
                got: planes.shape().to_vec(),
            });
        }
        Ok(FlowStack(planes))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-proposal feature maps: column `j` of each matrix is the feature of
/// unit `j` in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFeatureMaps {
    pub spatial: Tensor,
    pub temporal: Tensor,
}

struct StreamBackbone {
    convs: Vec<(ParamId, ParamId)>,
    linear: (ParamId, ParamId),
    in_channels: usize,
}

impl StreamBackbone {
    fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        config: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &width) in config.conv_widths.iter().enumerate() {
            let w = params.insert(
                format!("{prefix}.conv{i}.weight"),
                init::uniform_fan_in(rng, c_in * 9, &[width, c_in, 3, 3]),
            );
            let b = params.insert(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[width]));
            convs.push((w, b));
            c_in = width;
        }
        let w = params.insert(
            format!("{prefix}.proj.weight"),
            init::uniform_fan_in(rng, c_in, &[config.feature_dim, c_in]),
        );
        let b = params.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[config.feature_dim]));
        StreamBackbone {
            convs,
            linear: (w, b),
            in_channels,
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.linear.0, self.linear.1]);
        ids
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: Var,
        expected_hw: (usize, usize),
    ) -> Result<Var, UnitNetError> {
        let shape = tape.value(input).shape().to_vec();
        let expected = vec![self.in_channels, expected_hw.0, expected_hw.1];
        if shape != expected {
            return Err(UnitNetError::ShapeMismatch {
                expected,
                got: shape,
            });
        }
        let mut x = input;
        for &(w, b) in &self.convs {
            let w = tape.param(params, w);
            let b = tape.param(params, b);
            x = tape.conv2d(x, w, Some(b), (2, 2), (1, 1));
            x = tape.relu(x);
        }
        let pooled = tape.global_avg_pool(x);
        let (w, b) = self.linear;
        let w = tape.param(params, w);
        let b = tape.param(params, b);
        Ok(tape.linear(w, pooled, Some(b)))
    }
}

struct AuxHeads {
    action: (ParamId, ParamId),
    tiou: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

/// The unit-level two-stream network and its auxiliary heads.
pub struct UnitNet {
    config: BackboneConfig,
    spatial: Option<StreamBackbone>,
    temporal: Option<StreamBackbone>,
    aux: AuxHeads,
}

/// Boundaries of the three contiguous thirds of an `m`-column map:
/// splits at `floor(m/3)` and `floor(2m/3)`.
pub fn third_bounds(m: usize) -> Result<[(usize, usize); 3], UnitNetError> {
    if m < 3 {
        return Err(UnitNetError::ProposalTooShort { units: m });
    }
    let b1 = m / 3;
    let b2 = 2 * m / 3;
    Ok([(0, b1 - 1), (b1, b2 - 1), (b2, m - 1)])
}

impl UnitNet {
    pub fn new(
        config: BackboneConfig,
        num_classes: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, UnitNetError> {
        config.validate()?;
        let (spatial, temporal) = match config.mode {
            BackboneMode::Pixel => (
                Some(StreamBackbone::new(params, "unit.spatial", 3, &config, rng)),
                Some(StreamBackbone::new(
                    params,
                    "unit.temporal",
                    2 * config.unit_length as usize,
                    &config,
                    rng,
                )),
            ),
            BackboneMode::FeaturePassthrough => (None, None),
        };
        let d = config.feature_dim;
        let head = |params: &mut ParamSet, name: &str, out: usize, inp: usize| {
            let w = params.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp]));
            let b = params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
            (w, b)
        };
        let aux = AuxHeads {
            action: head(params, "unit.aux.action", num_classes + 1, d),
            tiou: head(params, "unit.aux.tiou", num_classes, 3 * d),
            reg: head(params, "unit.aux.reg", 2, 3 * d),
        };
        Ok(UnitNet {
            config,
            spatial,
            temporal,
            aux,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Every parameter belonging to the unit-level network, aux heads
    /// included. This is the set frozen while the span network trains.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(s) = &self.spatial {
            ids.extend(s.param_ids());
        }
        if let Some(t) = &self.temporal {
            ids.extend(t.param_ids());
        }
        ids.extend([
            self.aux.action.0,
            self.aux.action.1,
            self.aux.tiou.0,
            self.aux.tiou.1,
            self.aux.reg.0,
            self.aux.reg.1,
        ]);
        ids
    }

    /// Spatial feature of one RGB frame, `[3, H, W] -> [D]`.
    pub fn extract_spatial_feature(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        frame: Var,
    ) -> Result<Var, UnitNetError> {
        let backbone = self
            .spatial
            .as_ref()
            .ok_or_else(|| UnitNetError::InvalidConfig("passthrough mode has no pixel backbone".into()))?;
        backbone.forward(tape, params, frame, self.config.resolution)
    }

    /// Temporal feature of one flow stack, `[2 n_u, H, W] -> [D]`.
    pub fn extract_temporal_feature(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        stack: Var,
    ) -> Result<Var, UnitNetError> {
        let backbone = self
            .temporal
            .as_ref()
            .ok_or_else(|| UnitNetError::InvalidConfig("passthrough mode has no pixel backbone".into()))?;
        backbone.forward(tape, params, stack, self.config.resolution)
    }

    /// Build the `[D, M]` spatial and temporal maps for one proposal from
    /// per-unit pixel inputs.
    pub fn build_feature_maps_pixel(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        frames: &[Var],
        stacks: &[Var],
    ) -> Result<(Var, Var), UnitNetError> {
        if frames.len() != stacks.len() || frames.is_empty() {
            return Err(UnitNetError::UnitCountMismatch {
                units: frames.len().max(stacks.len()),
                frames: frames.len(),
                stacks: stacks.len(),
            });
        }
        let spatial_cols = frames
            .iter()
            .map(|&f| self.extract_spatial_feature(tape, params, f))
            .collect::<Result<Vec<_>, _>>()?;
        let temporal_cols = stacks
            .iter()
            .map(|&s| self.extract_temporal_feature(tape, params, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((tape.stack_cols(&spatial_cols), tape.stack_cols(&temporal_cols)))
    }

    /// Load precomputed per-unit features unchanged (passthrough mode).
    pub fn passthrough_maps(
        &self,
        tape: &mut Tape,
        maps: &ProposalFeatureMaps,
    ) -> Result<(Var, Var), UnitNetError> {
        let d = self.config.feature_dim;
        for t in [&maps.spatial, &maps.temporal] {
            if t.shape().len() != 2 || t.shape()[0] != d {
                return Err(UnitNetError::ShapeMismatch {
                    expected: vec![d],
                    got: t.shape().to_vec(),
                });
            }
        }
        if maps.spatial.cols() != maps.temporal.cols() {
            return Err(UnitNetError::UnitCountMismatch {
                units: maps.spatial.cols(),
                frames: maps.spatial.cols(),
                stacks: maps.temporal.cols(),
            });
        }
        Ok((tape.constant(maps.spatial.clone()), tape.constant(maps.temporal.clone())))
    }

    /// Auxiliary supervision heads.
    ///
    /// Both maps are split into three contiguous thirds and each third is
    /// average-pooled to one vector. The action head reads the equal-weight
    /// sum of the two middle-third vectors; the tIoU and regression heads
    /// read the equal-weight sum of the two three-third concatenations.
    pub fn auxiliary_heads(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        v_spatial: Var,
        v_temporal: Var,
    ) -> Result<HeadVars, UnitNetError> {
        let m = tape.value(v_spatial).cols();
        if tape.value(v_temporal).cols() != m {
            return Err(UnitNetError::UnitCountMismatch {
                units: m,
                frames: m,
                stacks: tape.value(v_temporal).cols(),
            });
        }
        let bounds = third_bounds(m)?;
        let pool_thirds = |tape: &mut Tape, v: Var| -> [Var; 3] {
            let pooled = tape.segment_pool_cols(v, &bounds, PoolMethod::Average);
            [0, 1, 2].map(|i| {
                let col = tape.slice_cols(pooled, i, i + 1);
                let d = tape.value(col).rows();
                tape.reshape(col, vec![d])
            })
        };
        let [s_before, s_mid, s_after] = pool_thirds(tape, v_spatial);
        let [t_before, t_mid, t_after] = pool_thirds(tape, v_temporal);

        let action_in = tape.add_scaled(0.5, s_mid, 0.5, t_mid);
        let s_cat = tape.concat(&[s_before, s_mid, s_after]);
        let t_cat = tape.concat(&[t_before, t_mid, t_after]);
        let context_in = tape.add_scaled(0.5, s_cat, 0.5, t_cat);

        let (aw, ab) = self.aux.action;
        let (tw, tb) = self.aux.tiou;
        let (rw, rb) = self.aux.reg;
        let aw = tape.param(params, aw);
        let ab = tape.param(params, ab);
        let tw = tape.param(params, tw);
        let tb = tape.param(params, tb);
        let rw = tape.param(params, rw);
        let rb = tape.param(params, rb);
        Ok(HeadVars {
            action: tape.linear(aw, action_in, Some(ab)),
            tiou: tape.linear(tw, context_in, Some(tb)),
            reg: tape.linear(rw, context_in, Some(rb)),
        })
    }
}

/// Frame choice within a unit: seeded random during training, the center
/// frame at inference.
pub fn frame_offset_in_unit(unit_length: u32, rng: Option<&mut ChaCha8Rng>) -> u32 {
    match rng {
        Some(rng) => rng.random_range(0..unit_length),
        None => unit_length / 2,
    }
}
