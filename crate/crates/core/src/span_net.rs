//! Long-range temporal modeling: variable-length proposal feature maps are
//! pooled into fixed-size three-stage maps, recoded through an affine
//! bottleneck, passed through a residual convolutional capture module, and
//! mapped to the three prediction heads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{conv_out_extent, init, ParamId, ParamSet, PoolMethod, Tape, Tensor, Var};
use crate::timeline::OffsetPair;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpanNetError {
    #[error("proposal has {units} units but pooling needs at least 3 * alpha = {}", 3 * alpha)]
    TooFewUnits { units: usize, alpha: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer}: input {input}x{width} underflows the configured stride chain")]
    ShapeUnderflow {
        layer: String,
        input: usize,
        width: usize,
    },
}

/// 0-based inclusive column ranges of the `3 * alpha` pooling segments.
///
/// Segment `j` (1-based) spans columns `floor((j-1)M/(3a)) + 1 ..= floor(jM/(3a))`
/// in 1-based coordinates.
pub fn segment_bounds(m: usize, alpha: usize) -> Result<Vec<(usize, usize)>, SpanNetError> {
    assert!(alpha >= 1, "alpha must be at least 1");
    let nseg = 3 * alpha;
    if m < nseg {
        return Err(SpanNetError::TooFewUnits { units: m, alpha });
    }
    Ok((1..=nseg)
        .map(|j| (((j - 1) * m) / nseg, (j * m) / nseg - 1))
        .collect())
}

/// Fixed-size pooled representation: `alpha` vectors per stage, stages in
/// temporal order (before, during, after the action).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStages {
    /// `[D, alpha]` matrices; column `j` is pooled vector `j` of the stage.
    pub before: Tensor,
    pub during: Tensor,
    pub after: Tensor,
}

impl PooledStages {
    pub fn stages(&self) -> [&Tensor; 3] {
        [&self.before, &self.during, &self.after]
    }
}

/// Pool a `[D, M]` feature map into `3 * alpha` segment vectors and group
/// them into the three stages.
pub fn self_adaptive_pool(
    v: &Tensor,
    alpha: usize,
    method: PoolMethod,
) -> Result<PooledStages, SpanNetError> {
    let m = v.cols();
    let bounds = segment_bounds(m, alpha)?;
    let mut tape = Tape::new();
    let input = tape.constant(v.clone());
    let pooled = tape.segment_pool_cols(input, &bounds, method);
    let full = tape.value(pooled);
    let slice = |from: usize, to: usize| {
        let d = full.rows();
        let mut out = Tensor::zeros(&[d, to - from]);
        for r in 0..d {
            for c in from..to {
                out.set2(r, c - from, full.at2(r, c));
            }
        }
        out
    };
    Ok(PooledStages {
        before: slice(0, alpha),
        during: slice(alpha, 2 * alpha),
        after: slice(2 * alpha, 3 * alpha),
    })
}

/// Recoded stage maps. Column `j` holds the recoding `W r_j + b` of pooled
/// vector `j`; each stage matrix is `[n, alpha]`, i.e. the capture module's
/// height-`n`, width-`alpha` input image.
#[derive(Debug, Clone, PartialEq)]
pub struct RecodedStages {
    pub before: Tensor,
    pub during: Tensor,
    pub after: Tensor,
}

fn affine_cols(input: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, SpanNetError> {
    let (n, d) = (w.rows(), w.cols());
    if input.rows() != d {
        return Err(SpanNetError::ShapeMismatch(format!(
            "recode weight expects {d} rows, feature map has {}",
            input.rows()
        )));
    }
    if b.shape() != [n] {
        return Err(SpanNetError::ShapeMismatch(format!(
            "recode bias of length {} does not match output dim {n}",
            b.numel()
        )));
    }
    let cols = input.cols();
    let mut out = Tensor::zeros(&[n, cols]);
    for j in 0..cols {
        for r in 0..n {
            let mut acc = b.data()[r];
            for k in 0..d {
                acc += w.at2(r, k) * input.at2(k, j);
            }
            out.set2(r, j, acc);
        }
    }
    Ok(out)
}

/// Apply one shared affine map `d_j = W r_j + b` to every pooled vector of
/// every stage.
pub fn recode(stages: &PooledStages, w: &Tensor, b: &Tensor) -> Result<RecodedStages, SpanNetError> {
    Ok(RecodedStages {
        before: affine_cols(&stages.before, w, b)?,
        during: affine_cols(&stages.during, w, b)?,
        after: affine_cols(&stages.after, w, b)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

/// One residual basic block: two 3x3 convolutions, the first carrying the
/// block stride, plus a 1x1 strided shortcut when the shape changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub channels: usize,
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub name: String,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

/// Architecture of one capture module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureConfig {
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub pool: PoolSpec,
}

/// Shape of one layer output as (channels, height, width).
pub type LayerShape = (usize, usize, usize);

impl CaptureConfig {
    /// The full-size ResNet-18-style stack: a 32-channel stem, four
    /// channel-doubling block pairs up to 512, and a final average pool.
    /// At a 129 x 9 input it pools down to 512 x 2 x 2.
    pub fn resnet18() -> Self {
        let block = |name: &str, channels: usize, stride: (usize, usize)| BlockSpec {
            name: name.to_string(),
            channels,
            stride,
        };
        CaptureConfig {
            stem: ConvSpec {
                name: "conv1".into(),
                channels: 32,
                kernel: (3, 3),
                stride: (2, 2),
                pad: (1, 1),
            },
            blocks: vec![
                block("conv2_a", 64, (2, 1)),
                block("conv2_b", 64, (1, 1)),
                block("conv3_a", 128, (2, 1)),
                block("conv3_b", 128, (1, 1)),
                block("conv4_a", 256, (2, 1)),
                block("conv4_b", 256, (1, 1)),
                block("conv5_a", 512, (2, 2)),
                block("conv5_b", 512, (1, 1)),
            ],
            pool: PoolSpec {
                name: "avg_pool".into(),
                kernel: (3, 2),
                stride: (2, 1),
            },
        }
    }

    /// A two-block desk-scale stack whose pool kernel adapts to the input
    /// footprint, so it stays valid across the sweepable (alpha, n) grid.
    pub fn compact(alpha: usize, n: usize) -> Self {
        assert!(n >= 3 && alpha >= 1, "compact capture needs n >= 3, alpha >= 1");
        let mut cfg = CaptureConfig {
            stem: ConvSpec {
                name: "conv1".into(),
                channels: 8,
                kernel: (3, 3),
                stride: (2, 2),
                pad: (1, 1),
            },
            blocks: vec![
                BlockSpec {
                    name: "conv2_a".into(),
                    channels: 16,
                    stride: (2, 1),
                },
                BlockSpec {
                    name: "conv2_b".into(),
                    channels: 16,
                    stride: (1, 1),
                },
            ],
            pool: PoolSpec {
                name: "avg_pool".into(),
                kernel: (1, 1),
                stride: (1, 1),
            },
        };
        let pre_pool = cfg
            .shape_trace(alpha, n)
            .expect("stem and blocks accept any n >= 3");
        let (_, h, w) = pre_pool[pre_pool.len() - 2].1;
        cfg.pool.kernel = (h.min(3), w.min(2));
        cfg
    }

    /// Per-layer output shapes for a 1-channel `n x alpha` input, without
    /// running the network. Fails with the offending layer's name when the
    /// stride chain underflows.
    pub fn shape_trace(
        &self,
        alpha: usize,
        n: usize,
    ) -> Result<Vec<(String, LayerShape)>, SpanNetError> {
        let mut trace = Vec::new();
        let step = |layer: &str,
                    (h, w): (usize, usize),
                    kernel: (usize, usize),
                    stride: (usize, usize),
                    pad: (usize, usize)|
         -> Result<(usize, usize), SpanNetError> {
            let oh = conv_out_extent(h, kernel.0, stride.0, pad.0);
            let ow = conv_out_extent(w, kernel.1, stride.1, pad.1);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
                _ => Err(SpanNetError::ShapeUnderflow {
                    layer: layer.to_string(),
                    input: h,
                    width: w,
                }),
            }
        };
        let mut dims = step(
            &self.stem.name,
            (n, alpha),
            self.stem.kernel,
            self.stem.stride,
            self.stem.pad,
        )?;
        trace.push((self.stem.name.clone(), (self.stem.channels, dims.0, dims.1)));
        for block in &self.blocks {
            // first conv carries the stride; second keeps the size
            dims = step(&block.name, dims, (3, 3), block.stride, (1, 1))?;
            let keep = step(&block.name, dims, (3, 3), (1, 1), (1, 1))?;
            debug_assert_eq!(keep, dims);
            trace.push((block.name.clone(), (block.channels, dims.0, dims.1)));
        }
        dims = step(&self.pool.name, dims, self.pool.kernel, self.pool.stride, (0, 0))?;
        let channels = self.blocks.last().map_or(self.stem.channels, |b| b.channels);
        trace.push((self.pool.name.clone(), (channels, dims.0, dims.1)));
        Ok(trace)
    }

    /// Flattened feature length produced for a 1-channel `n x alpha` input.
    pub fn output_dim(&self, alpha: usize, n: usize) -> Result<usize, SpanNetError> {
        let trace = self.shape_trace(alpha, n)?;
        let (c, h, w) = trace.last().unwrap().1;
        Ok(c * h * w)
    }
}

struct BlockParams {
    spec: BlockSpec,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    shortcut: Option<(ParamId, ParamId)>,
}

/// One capture module instance: configuration plus parameter handles.
pub struct CaptureNet {
    config: CaptureConfig,
    stem: (ParamId, ParamId),
    blocks: Vec<BlockParams>,
}

impl CaptureNet {
    /// Allocate parameters for one capture module under `prefix`.
    pub fn new(
        config: &CaptureConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv_pair = |params: &mut ParamSet,
                         rng: &mut ChaCha8Rng,
                         name: String,
                         out_c: usize,
                         in_c: usize,
                         kernel: (usize, usize)| {
            let fan_in = in_c * kernel.0 * kernel.1;
            let w = params.insert(
                format!("{name}.weight"),
                init::uniform_fan_in(rng, fan_in, &[out_c, in_c, kernel.0, kernel.1]),
            );
            let b = params.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]));
            (w, b)
        };
        let stem = conv_pair(
            params,
            rng,
            format!("{prefix}.{}", config.stem.name),
            config.stem.channels,
            1,
            config.stem.kernel,
        );
        let mut in_c = config.stem.channels;
        let blocks = config
            .blocks
            .iter()
            .map(|spec| {
                let base = format!("{prefix}.{}", spec.name);
                let conv1 = conv_pair(params, rng, format!("{base}.conv1"), spec.channels, in_c, (3, 3));
                let conv2 = conv_pair(
                    params,
                    rng,
                    format!("{base}.conv2"),
                    spec.channels,
                    spec.channels,
                    (3, 3),
                );
                let needs_projection = spec.stride != (1, 1) || spec.channels != in_c;
                let shortcut = needs_projection.then(|| {
                    conv_pair(params, rng, format!("{base}.shortcut"), spec.channels, in_c, (1, 1))
                });
                in_c = spec.channels;
                BlockParams {
                    spec: spec.clone(),
                    conv1,
                    conv2,
                    shortcut,
                }
            })
            .collect();
        CaptureNet {
            config: config.clone(),
            stem,
            blocks,
        }
    }

    pub fn config(&self) -> &CaptureConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.0, self.stem.1];
        for b in &self.blocks {
            ids.extend([b.conv1.0, b.conv1.1, b.conv2.0, b.conv2.1]);
            if let Some((w, bi)) = b.shortcut {
                ids.extend([w, bi]);
            }
        }
        ids
    }

    /// Forward pass over a `[1, n, alpha]` stage image, returning the
    /// flattened feature vector.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Var {
        self.forward_traced(tape, params, input).0
    }

    /// Forward pass that also reports each named layer's output shape.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: Var,
    ) -> (Var, Vec<(String, LayerShape)>) {
        let mut trace = Vec::new();
        let record = |tape: &Tape, trace: &mut Vec<(String, LayerShape)>, name: &str, v: Var| {
            let s = tape.value(v).shape();
            trace.push((name.to_string(), (s[0], s[1], s[2])));
        };
        let (sw, sb) = self.stem;
        let w = tape.param(params, sw);
        let b = tape.param(params, sb);
        let mut x = tape.conv2d(input, w, Some(b), self.config.stem.stride, self.config.stem.pad);
        record(tape, &mut trace, &self.config.stem.name, x);
        x = tape.relu(x);
        for block in &self.blocks {
            let w1 = tape.param(params, block.conv1.0);
            let b1 = tape.param(params, block.conv1.1);
            let h = tape.conv2d(x, w1, Some(b1), block.spec.stride, (1, 1));
            let h = tape.relu(h);
            let w2 = tape.param(params, block.conv2.0);
            let b2 = tape.param(params, block.conv2.1);
            let h = tape.conv2d(h, w2, Some(b2), (1, 1), (1, 1));
            let shortcut = match block.shortcut {
                Some((ws, bs)) => {
                    let ws = tape.param(params, ws);
                    let bs = tape.param(params, bs);
                    tape.conv2d(x, ws, Some(bs), block.spec.stride, (0, 0))
                }
                None => x,
            };
            let sum = tape.add(h, shortcut);
            x = tape.relu(sum);
            record(tape, &mut trace, &block.spec.name, x);
        }
        x = tape.avg_pool2d(x, self.config.pool.kernel, self.config.pool.stride);
        record(tape, &mut trace, &self.config.pool.name, x);
        (tape.flatten(x), trace)
    }
}

/// Outputs of the three prediction heads for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// K action classes followed by the background class.
    pub action_logits: Vec<f64>,
    pub tiou_logits: Vec<f64>,
    pub regression: OffsetPair,
}

/// Parameter handles for one set of prediction heads.
pub struct HeadParams {
    pub action: (ParamId, ParamId),
    pub tiou: (ParamId, ParamId),
    pub reg: (ParamId, ParamId),
}

impl HeadParams {
    /// Heads read a stage feature of `feature_dim`: the action head sees the
    /// during-stage vector alone, the tIoU and regression heads see the
    /// three-stage concatenation. Weights start at zero so untrained heads
    /// predict uniform classes and zero offsets.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        feature_dim: usize,
        num_classes: usize,
    ) -> Self {
        let head = |params: &mut ParamSet, name: String, out: usize, inp: usize| {
            let w = params.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp]));
            let b = params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
            (w, b)
        };
        HeadParams {
            action: head(params, format!("{prefix}.action"), num_classes + 1, feature_dim),
            tiou: head(params, format!("{prefix}.tiou"), num_classes, 3 * feature_dim),
            reg: head(params, format!("{prefix}.reg"), 2, 3 * feature_dim),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.action.0,
            self.action.1,
            self.tiou.0,
            self.tiou.1,
            self.reg.0,
            self.reg.1,
        ]
    }
}

/// Head variables on a tape: action logits, tIoU logits, regression pair.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub action: Var,
    pub tiou: Var,
    pub reg: Var,
}

/// Run the prediction heads over the three stage features. The action head
/// reads only the during-stage vector; the tIoU and regression heads read
/// the `[f_b, f_d, f_a]` concatenation.
pub fn stage_heads(
    tape: &mut Tape,
    params: &ParamSet,
    heads: &HeadParams,
    f_before: Var,
    f_during: Var,
    f_after: Var,
) -> HeadVars {
    let concat = tape.concat(&[f_before, f_during, f_after]);
    let (aw, ab) = heads.action;
    let (tw, tb) = heads.tiou;
    let (rw, rb) = heads.reg;
    let aw = tape.param(params, aw);
    let ab = tape.param(params, ab);
    let tw = tape.param(params, tw);
    let tb = tape.param(params, tb);
    let rw = tape.param(params, rw);
    let rb = tape.param(params, rb);
    HeadVars {
        action: tape.linear(aw, f_during, Some(ab)),
        tiou: tape.linear(tw, concat, Some(tb)),
        reg: tape.linear(rw, concat, Some(rb)),
    }
}
