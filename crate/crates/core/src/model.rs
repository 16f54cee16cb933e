//! Assembly of the full two-subnet network: unit-level feature extraction
//! feeding per-stream pooling, recoding, capture modules, and prediction
//! heads, with the two streams fused by equal-weight logit averaging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamId, ParamSet, PoolMethod, Tape, Tensor, Var};
use crate::span_net::{
    segment_bounds, stage_heads, CaptureConfig, CaptureNet, HeadOutputs, HeadParams, HeadVars,
    SpanNetError,
};
use crate::timeline::OffsetPair;
use crate::unit_net::{BackboneConfig, ProposalFeatureMaps, UnitNet, UnitNetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Unit(#[from] UnitNetError),
    #[error(transparent)]
    Span(#[from] SpanNetError),
}

/// How the tIoU head is read and trained: softmax over the K classes, or
/// one sigmoid binary classifier per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiouHeadMode {
    Softmax,
    Sigmoid,
}

/// Architecture of the full network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of action classes K; the action head adds a background slot.
    pub num_classes: usize,
    /// Segments per stage.
    pub alpha: usize,
    /// Recoded feature dimension n.
    pub recode_dim: usize,
    pub pooling: PoolMethod,
    pub tiou_head: TiouHeadMode,
    /// Whether the two streams share one set of span-network weights.
    pub share_streams: bool,
    pub capture: CaptureConfig,
    pub backbone: BackboneConfig,
}

struct SpanStream {
    /// One affine recoder per stage (before, during, after).
    recode: [(ParamId, ParamId); 3],
    captures: [CaptureNet; 3],
    heads: HeadParams,
}

impl SpanStream {
    fn new(
        config: &ModelConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let d = config.backbone.feature_dim;
        let n = config.recode_dim;
        let stage_names = ["before", "during", "after"];
        let recode = stage_names.map(|stage| {
            let w = params.insert(
                format!("{prefix}.recode.{stage}.weight"),
                crate::nn::init::uniform_fan_in(rng, d, &[n, d]),
            );
            let b = params.insert(format!("{prefix}.recode.{stage}.bias"), Tensor::zeros(&[n]));
            (w, b)
        });
        // fail early when the capture chain cannot accept an n x alpha map
        let out_dim = config.capture.output_dim(config.alpha, n)?;
        let captures = stage_names.map(|stage| {
            CaptureNet::new(
                &config.capture,
                params,
                &format!("{prefix}.capture.{stage}"),
                rng,
            )
        });
        let heads = HeadParams::new(params, &format!("{prefix}.heads"), out_dim, config.num_classes);
        Ok(SpanStream {
            recode,
            captures,
            heads,
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (w, b) in &self.recode {
            ids.extend([*w, *b]);
        }
        for c in &self.captures {
            ids.extend(c.param_ids());
        }
        ids.extend(self.heads.param_ids());
        ids
    }
}

/// Per-unit inputs for one proposal.
pub enum UnitInputs {
    Features(ProposalFeatureMaps),
    Pixels {
        frames: Vec<Tensor>,
        stacks: Vec<Tensor>,
    },
}

/// The full network: parameter handles plus configuration.
pub struct Network {
    pub config: ModelConfig,
    pub unit_net: UnitNet,
    spatial: SpanStream,
    /// `None` when streams share weights.
    temporal: Option<SpanStream>,
}

impl Network {
    /// Build a network with seeded initialization, inserting parameters
    /// into `params` in a fixed order.
    pub fn new(config: ModelConfig, params: &mut ParamSet, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit_net = UnitNet::new(
            config.backbone.clone(),
            config.num_classes,
            params,
            &mut rng,
        )?;
        let spatial = SpanStream::new(&config, params, "span.spatial", &mut rng)?;
        let temporal = if config.share_streams {
            None
        } else {
            Some(SpanStream::new(&config, params, "span.temporal", &mut rng)?)
        };
        Ok(Network {
            config,
            unit_net,
            spatial,
            temporal,
        })
    }

    /// Parameters of the unit-level subnet (backbones and aux heads).
    pub fn unit_param_ids(&self) -> Vec<ParamId> {
        self.unit_net.param_ids()
    }

    /// Parameters of the span-level subnet (both streams).
    pub fn span_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.spatial.param_ids();
        if let Some(t) = &self.temporal {
            ids.extend(t.param_ids());
        }
        ids
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.unit_param_ids();
        ids.extend(self.span_param_ids());
        ids
    }

    /// Turn per-unit inputs into the `[D, M]` spatial and temporal map
    /// variables, running the pixel backbones when needed.
    pub fn feature_maps(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        inputs: &UnitInputs,
    ) -> Result<(Var, Var), ModelError> {
        match inputs {
            UnitInputs::Features(maps) => Ok(self.unit_net.passthrough_maps(tape, maps)?),
            UnitInputs::Pixels { frames, stacks } => {
                let frame_vars: Vec<Var> =
                    frames.iter().map(|f| tape.constant(f.clone())).collect();
                let stack_vars: Vec<Var> =
                    stacks.iter().map(|s| tape.constant(s.clone())).collect();
                Ok(self
                    .unit_net
                    .build_feature_maps_pixel(tape, params, &frame_vars, &stack_vars)?)
            }
        }
    }

    fn stream_forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        stream: &SpanStream,
        v: Var,
    ) -> Result<HeadVars, ModelError> {
        let m = tape.value(v).cols();
        let alpha = self.config.alpha;
        let bounds = segment_bounds(m, alpha)?;
        let pooled = tape.segment_pool_cols(v, &bounds, self.config.pooling);
        let mut stage_features = Vec::with_capacity(3);
        for (i, (w, b)) in stream.recode.iter().enumerate() {
            let stage = tape.slice_cols(pooled, i * alpha, (i + 1) * alpha);
            let w = tape.param(params, *w);
            let b = tape.param(params, *b);
            let recoded = tape.matmul(w, stage);
            let recoded = tape.add_col_broadcast(recoded, b);
            let n = self.config.recode_dim;
            let image = tape.reshape(recoded, vec![1, n, alpha]);
            stage_features.push(stream.captures[i].forward(tape, params, image));
        }
        Ok(stage_heads(
            tape,
            params,
            &stream.heads,
            stage_features[0],
            stage_features[1],
            stage_features[2],
        ))
    }

    /// Span-network forward over both streams with equal-weight logit fusion.
    pub fn forward_span(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        v_spatial: Var,
        v_temporal: Var,
    ) -> Result<HeadVars, ModelError> {
        let s = self.stream_forward(tape, params, &self.spatial, v_spatial)?;
        let t_stream = self.temporal.as_ref().unwrap_or(&self.spatial);
        let t = self.stream_forward(tape, params, t_stream, v_temporal)?;
        Ok(HeadVars {
            action: tape.add_scaled(0.5, s.action, 0.5, t.action),
            tiou: tape.add_scaled(0.5, s.tiou, 0.5, t.tiou),
            reg: tape.add_scaled(0.5, s.reg, 0.5, t.reg),
        })
    }

    /// Auxiliary heads over the unit-level maps.
    pub fn forward_aux(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        v_spatial: Var,
        v_temporal: Var,
    ) -> Result<HeadVars, ModelError> {
        Ok(self
            .unit_net
            .auxiliary_heads(tape, params, v_spatial, v_temporal)?)
    }

    /// Inference convenience: run one proposal through the span network and
    /// extract plain head outputs.
    pub fn infer_proposal(
        &self,
        params: &ParamSet,
        inputs: &UnitInputs,
    ) -> Result<HeadOutputs, ModelError> {
        let mut tape = Tape::new();
        let (v_s, v_t) = self.feature_maps(&mut tape, params, inputs)?;
        let heads = self.forward_span(&mut tape, params, v_s, v_t)?;
        Ok(extract_head_outputs(&tape, &heads))
    }
}

/// Read plain values out of head variables.
pub fn extract_head_outputs(tape: &Tape, heads: &HeadVars) -> HeadOutputs {
    let reg = tape.value(heads.reg).data();
    HeadOutputs {
        action_logits: tape.value(heads.action).data().to_vec(),
        tiou_logits: tape.value(heads.tiou).data().to_vec(),
        regression: OffsetPair {
            d_loc: reg[0],
            d_len: reg[1],
        },
    }
}
