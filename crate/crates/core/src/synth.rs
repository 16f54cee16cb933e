//! Synthetic video generation with planted action instances, in two modes:
//! per-unit feature tracks drawn from class-conditional patterns, or tiny
//! rendered frames with analytically consistent flow fields. Both come with
//! an actionness track correlated with instance presence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::Fnv1a;
use crate::nn::init::standard_normal;
use crate::nn::Tensor;
use crate::proposals::{ActionInstance, AnnotationFile, VideoAnnotations, ANNOTATION_SCHEMA_VERSION};
use crate::timeline::TemporalInterval;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("cannot pack {instances} instances of up to {max_duration} frames into {frames} frames")]
    InfeasiblePacking {
        instances: usize,
        max_duration: u32,
        frames: u32,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {what} file {path}: {message}")]
    Format {
        what: &'static str,
        path: String,
        message: String,
    },
    #[error("annotation error: {0}")]
    Annotations(String),
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Minimum background separation between planted instances, in units.
pub const MIN_GAP_UNITS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataMode {
    Feature { dim: usize },
    Pixel { height: usize, width: usize },
}

/// Generation parameters for one synthetic split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Seed for the class-conditional patterns. Splits meant to be used
    /// together (train/test) must share it so they describe one world.
    pub pattern_seed: u64,
    pub num_videos: usize,
    pub frames_per_video: u32,
    pub unit_length: u32,
    /// Number of action classes K.
    pub num_classes: usize,
    pub instances_per_video: usize,
    /// Inclusive instance duration range in frames.
    pub duration_range: (u32, u32),
    pub mode: DataMode,
    /// Additive noise level on features, pixels, and actionness.
    pub noise: f64,
    pub fps: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_classes < 2 {
            return Err(SynthError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.unit_length < 1 || self.frames_per_video < self.unit_length {
            return Err(SynthError::InvalidConfig(
                "video must contain at least one unit".into(),
            ));
        }
        let (lo, hi) = self.duration_range;
        if lo < 1 || hi < lo || hi > self.frames_per_video {
            return Err(SynthError::InvalidConfig(format!(
                "duration range {:?} outside video of {} frames",
                self.duration_range, self.frames_per_video
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::InvalidConfig("noise must be finite and >= 0".into()));
        }
        if let DataMode::Feature { dim } = self.mode {
            if dim < 8 {
                return Err(SynthError::InvalidConfig("feature dim below 8".into()));
            }
        }
        let k = self.instances_per_video as u32;
        let gap = MIN_GAP_UNITS * self.unit_length;
        let edge = self.unit_length;
        let worst = k * hi + k.saturating_sub(1) * gap + 2 * edge;
        if k > 0 && worst > self.frames_per_video {
            return Err(SynthError::InfeasiblePacking {
                instances: self.instances_per_video,
                max_duration: hi,
                frames: self.frames_per_video,
            });
        }
        Ok(())
    }
}

/// Per-video payload.
#[derive(Debug, Clone, PartialEq)]
pub enum VideoData {
    Features {
        /// `[D, units]` per-unit feature maps.
        spatial: Tensor,
        temporal: Tensor,
    },
    Pixels {
        /// One `[3, H, W]` tensor per frame.
        frames: Vec<Tensor>,
        /// One `[2, H, W]` flow field per frame (frame k to k+1; the last
        /// entry is zero).
        flows: Vec<Tensor>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: u32,
    pub fps: f64,
    pub unit_length: u32,
    pub instances: Vec<ActionInstance>,
    /// Per-unit actionness scores in [0, 1].
    pub actionness: Vec<f64>,
    pub data: VideoData,
}

impl VideoRecord {
    pub fn unit_count(&self) -> usize {
        (self.frames / self.unit_length) as usize
    }
}

/// The class-conditional patterns a feature-mode dataset was built from.
#[derive(Debug, Clone)]
pub struct ClassPatterns {
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Vec<Vec<f64>>,
    pub background_spatial: Vec<f64>,
    pub background_temporal: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Place `count` non-overlapping instances with the configured gaps by
/// distributing the free slack uniformly around them.
fn place_instances(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TemporalInterval>, SynthError> {
    let count = cfg.instances_per_video;
    if count == 0 {
        return Ok(Vec::new());
    }
    let gap = MIN_GAP_UNITS * cfg.unit_length;
    let edge = cfg.unit_length;
    let durations: Vec<u32> = (0..count)
        .map(|_| rng.random_range(cfg.duration_range.0..=cfg.duration_range.1))
        .collect();
    let total: u32 = durations.iter().sum();
    let fixed = total + gap * (count as u32 - 1) + 2 * edge;
    let slack = cfg.frames_per_video.checked_sub(fixed).ok_or(
        SynthError::InfeasiblePacking {
            instances: count,
            max_duration: cfg.duration_range.1,
            frames: cfg.frames_per_video,
        },
    )?;
    // split the slack into count + 1 buckets via sorted uniform cuts
    let mut cuts: Vec<u32> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut intervals = Vec::with_capacity(count);
    let mut cursor = edge;
    let mut prev_cut = 0;
    for (i, d) in durations.iter().enumerate() {
        let bucket = cuts[i] - prev_cut;
        prev_cut = cuts[i];
        cursor += bucket;
        let start = cursor + 1;
        let end = cursor + d;
        intervals.push(TemporalInterval::new(start, end).expect("placement stays in bounds"));
        cursor = end + gap;
    }
    Ok(intervals)
}

/// Fraction of the unit's frames covered by the interval.
fn unit_coverage(unit_index: usize, unit_length: u32, interval: &TemporalInterval) -> f64 {
    let start = unit_length * unit_index as u32 + 1;
    let end = unit_length * (unit_index as u32 + 1);
    let unit = TemporalInterval::new(start, end).unwrap();
    unit.intersection_frames(interval) as f64 / unit_length as f64
}

fn generate_feature_video(
    cfg: &SyntheticConfig,
    patterns: &ClassPatterns,
    instances: &[ActionInstance],
    units: usize,
    rng: &mut ChaCha8Rng,
) -> VideoData {
    let DataMode::Feature { dim } = cfg.mode else {
        unreachable!("feature generator called in pixel mode")
    };
    let mut spatial = Tensor::zeros(&[dim, units]);
    let mut temporal = Tensor::zeros(&[dim, units]);
    for u in 0..units {
        let (coverage, class) = instance_coverage(cfg, instances, u);
        for d in 0..dim {
            let (ps, pt) = match class {
                Some(c) => (
                    patterns.spatial[c as usize][d],
                    patterns.temporal[c as usize][d],
                ),
                None => (patterns.background_spatial[d], patterns.background_temporal[d]),
            };
            let s = (1.0 - coverage) * patterns.background_spatial[d] + coverage * ps
                + cfg.noise * standard_normal(rng);
            let t = (1.0 - coverage) * patterns.background_temporal[d] + coverage * pt
                + cfg.noise * standard_normal(rng);
            spatial.set2(d, u, s);
            temporal.set2(d, u, t);
        }
    }
    VideoData::Features { spatial, temporal }
}

/// Coverage of unit `u` by its (single, thanks to gap placement) owning
/// instance, if any.
fn instance_coverage(
    cfg: &SyntheticConfig,
    instances: &[ActionInstance],
    unit: usize,
) -> (f64, Option<u32>) {
    let mut best = (0.0, None);
    for inst in instances {
        let cov = unit_coverage(unit, cfg.unit_length, &inst.interval);
        if cov > best.0 {
            best = (cov, Some(inst.class));
        }
    }
    best
}

fn generate_pixel_video(
    cfg: &SyntheticConfig,
    instances: &[ActionInstance],
    rng: &mut ChaCha8Rng,
) -> VideoData {
    let DataMode::Pixel { height, width } = cfg.mode else {
        unreachable!("pixel generator called in feature mode")
    };
    let t = cfg.frames_per_video as usize;
    let square = (height.min(width) / 4).max(2);
    let k = cfg.num_classes as f64;
    let mut frames = Vec::with_capacity(t);
    let mut flows = Vec::with_capacity(t);
    // the shape sits still in background and moves along a class-specific
    // direction inside an instance
    let mut pos = ((height / 2) as f64, (width / 2) as f64);
    for frame_idx in 0..t {
        let frame_no = frame_idx as u32 + 1;
        let motion = instances
            .iter()
            .find(|inst| inst.interval.start() <= frame_no && frame_no <= inst.interval.end())
            .map(|inst| {
                let angle = std::f64::consts::TAU * inst.class as f64 / k;
                (angle.sin(), angle.cos())
            });
        let (dy, dx) = motion.unwrap_or((0.0, 0.0));
        let mut img = Tensor::zeros(&[3, height, width]);
        let mut flow = Tensor::zeros(&[2, height, width]);
        let top = pos.0.rem_euclid(height as f64) as usize;
        let left = pos.1.rem_euclid(width as f64) as usize;
        for dy_px in 0..square {
            for dx_px in 0..square {
                let y = (top + dy_px) % height;
                let x = (left + dx_px) % width;
                img.set3(0, y, x, 1.0);
                img.set3(1, y, x, 0.5);
                img.set3(2, y, x, 0.25);
                flow.set3(0, y, x, dx);
                flow.set3(1, y, x, dy);
            }
        }
        if cfg.noise > 0.0 {
            for v in img.data_mut() {
                *v += cfg.noise * standard_normal(rng);
            }
        }
        frames.push(img);
        flows.push(flow);
        pos = (pos.0 + dy, pos.1 + dx);
    }
    if let Some(last) = flows.last_mut() {
        *last = Tensor::zeros(&[2, height, width]);
    }
    VideoData::Pixels { frames, flows }
}

/// Deterministic per-video seed derivation.
fn video_seed(base: u64, index: usize) -> u64 {
    base ^ (0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1))
}

/// Draw the class-conditional patterns for a feature-mode dataset.
pub fn draw_patterns(cfg: &SyntheticConfig) -> Option<ClassPatterns> {
    let DataMode::Feature { dim } = cfg.mode else {
        return None;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pattern_seed ^ 0x5051_4152_4d53_u64);
    Some(ClassPatterns {
        spatial: (0..cfg.num_classes).map(|_| unit_vector(&mut rng, dim)).collect(),
        temporal: (0..cfg.num_classes).map(|_| unit_vector(&mut rng, dim)).collect(),
        background_spatial: unit_vector(&mut rng, dim),
        background_temporal: unit_vector(&mut rng, dim),
    })
}

/// Generate a full synthetic dataset. Deterministic under the seed.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let patterns = draw_patterns(cfg);
    let units = (cfg.frames_per_video / cfg.unit_length) as usize;
    let videos = (0..cfg.num_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, i));
            let spans = place_instances(cfg, &mut rng)?;
            let instances: Vec<ActionInstance> = spans
                .into_iter()
                .map(|interval| ActionInstance {
                    class: rng.random_range(0..cfg.num_classes as u32),
                    interval,
                })
                .collect();
            let actionness: Vec<f64> = (0..units)
                .map(|u| {
                    let (coverage, _) = instance_coverage(cfg, &instances, u);
                    (coverage + cfg.noise * standard_normal(&mut rng)).clamp(0.0, 1.0)
                })
                .collect();
            let data = match cfg.mode {
                DataMode::Feature { .. } => generate_feature_video(
                    cfg,
                    patterns.as_ref().expect("feature mode has patterns"),
                    &instances,
                    units,
                    &mut rng,
                ),
                DataMode::Pixel { .. } => generate_pixel_video(cfg, &instances, &mut rng),
            };
            Ok(VideoRecord {
                video_id: format!("vid_{i:04}"),
                frames: cfg.frames_per_video,
                fps: cfg.fps,
                unit_length: cfg.unit_length,
                instances,
                actionness,
                data,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Dataset { videos })
}

pub fn annotations(dataset: &Dataset) -> AnnotationFile {
    AnnotationFile {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        videos: dataset
            .videos
            .iter()
            .map(|v| VideoAnnotations {
                video_id: v.video_id.clone(),
                frames: v.frames,
                fps: v.fps,
                instances: v.instances.clone(),
            })
            .collect(),
    }
}

// --- binary file formats -------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"TALF";
const PIXEL_MAGIC: &[u8; 4] = b"TALP";
const FORMAT_VERSION: u32 = 1;

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn new() -> Self {
        ByteWriter(Vec::new())
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: impl Iterator<Item = f64>) {
        for v in vs {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Some(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        )
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Encode a feature-mode video: header (D, unit count, unit length), then
/// the spatial features, temporal features, and actionness track as
/// little-endian 32-bit reals (unit-major).
pub fn encode_feature_file(video: &VideoRecord) -> Vec<u8> {
    let VideoData::Features { spatial, temporal } = &video.data else {
        panic!("encode_feature_file on a pixel-mode video");
    };
    let d = spatial.rows();
    let units = spatial.cols();
    let mut w = ByteWriter::new();
    w.0.extend_from_slice(FEATURE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(d as u32);
    w.u32(units as u32);
    w.u32(video.unit_length);
    for t in [spatial, temporal] {
        w.f32s((0..units).flat_map(|j| (0..d).map(move |r| (r, j))).map(|(r, j)| t.at2(r, j)));
    }
    w.f32s(video.actionness.iter().copied());
    w.0
}

/// Decode a feature file into (spatial, temporal, actionness, unit_length).
pub fn decode_feature_file(
    bytes: &[u8],
    path: &str,
) -> Result<(Tensor, Tensor, Vec<f64>, u32), SynthError> {
    let bad = |message: &str| SynthError::Format {
        what: "feature",
        path: path.to_string(),
        message: message.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(FEATURE_MAGIC) {
        return Err(bad("missing TALF magic"));
    }
    if r.u32() != Some(FORMAT_VERSION) {
        return Err(bad("unsupported version"));
    }
    let d = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let units = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let unit_length = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut maps = Vec::new();
    for _ in 0..2 {
        let flat = r.f32s(d * units).ok_or_else(|| bad("truncated features"))?;
        let mut t = Tensor::zeros(&[d, units]);
        for j in 0..units {
            for row in 0..d {
                t.set2(row, j, flat[j * d + row]);
            }
        }
        maps.push(t);
    }
    let actionness = r.f32s(units).ok_or_else(|| bad("truncated actionness"))?;
    if !r.done() {
        return Err(bad("trailing bytes"));
    }
    let temporal = maps.pop().unwrap();
    let spatial = maps.pop().unwrap();
    Ok((spatial, temporal, actionness, unit_length))
}

/// Encode a pixel-mode video: header (T, H, W, unit length), frames as
/// `[3, H, W]` rasters, flows as `[2, H, W]` fields, then actionness.
pub fn encode_pixel_file(video: &VideoRecord) -> Vec<u8> {
    let VideoData::Pixels { frames, flows } = &video.data else {
        panic!("encode_pixel_file on a feature-mode video");
    };
    let (h, w_px) = (frames[0].shape()[1], frames[0].shape()[2]);
    let mut w = ByteWriter::new();
    w.0.extend_from_slice(PIXEL_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(frames.len() as u32);
    w.u32(h as u32);
    w.u32(w_px as u32);
    w.u32(video.unit_length);
    for f in frames {
        w.f32s(f.data().iter().copied());
    }
    for f in flows {
        w.f32s(f.data().iter().copied());
    }
    w.f32s(video.actionness.iter().copied());
    w.0
}

type PixelFilePayload = (Vec<Tensor>, Vec<Tensor>, Vec<f64>, u32);

pub fn decode_pixel_file(bytes: &[u8], path: &str) -> Result<PixelFilePayload, SynthError> {
    let bad = |message: &str| SynthError::Format {
        what: "pixel",
        path: path.to_string(),
        message: message.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(PIXEL_MAGIC) {
        return Err(bad("missing TALP magic"));
    }
    if r.u32() != Some(FORMAT_VERSION) {
        return Err(bad("unsupported version"));
    }
    let t = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let h = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let w_px = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let unit_length = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        frames.push(Tensor::new(
            vec![3, h, w_px],
            r.f32s(3 * h * w_px).ok_or_else(|| bad("truncated frames"))?,
        ));
    }
    let mut flows = Vec::with_capacity(t);
    for _ in 0..t {
        flows.push(Tensor::new(
            vec![2, h, w_px],
            r.f32s(2 * h * w_px).ok_or_else(|| bad("truncated flows"))?,
        ));
    }
    let units = unit_length_count(t as u32, unit_length);
    let actionness = r.f32s(units).ok_or_else(|| bad("truncated actionness"))?;
    if !r.done() {
        return Err(bad("trailing bytes"));
    }
    Ok((frames, flows, actionness, unit_length))
}

fn unit_length_count(frames: u32, unit_length: u32) -> usize {
    (frames / unit_length) as usize
}

// --- on-disk dataset layout ----------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    schema_version: u32,
    config: SyntheticConfig,
    fingerprint: u64,
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Serialize a dataset under `dir`: `annotations.json`, `dataset.json`, and
/// one binary payload per video under `data/`.
pub fn write_dataset(dataset: &Dataset, cfg: &SyntheticConfig, dir: &Path) -> Result<(), SynthError> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| io_err(&data_dir, e))?;
    let ann = annotations(dataset);
    let ann_path = dir.join("annotations.json");
    let ann_json = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    fs::write(&ann_path, &ann_json).map_err(|e| io_err(&ann_path, e))?;

    let mut hasher = Fnv1a::new();
    hasher.update(ann_json.as_bytes());
    for video in &dataset.videos {
        let (bytes, ext) = match video.data {
            VideoData::Features { .. } => (encode_feature_file(video), "talf"),
            VideoData::Pixels { .. } => (encode_pixel_file(video), "talp"),
        };
        hasher.update(&bytes);
        let path = data_dir.join(format!("{}.{ext}", video.video_id));
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(&path, e))?;
    }
    let meta = DatasetMeta {
        schema_version: DATASET_SCHEMA_VERSION,
        config: cfg.clone(),
        fingerprint: hasher.finish(),
    };
    let meta_path = dir.join("dataset.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

/// Content fingerprint of a dataset directory, matching what
/// [`write_dataset`] stored.
pub fn dataset_fingerprint(dir: &Path) -> Result<u64, SynthError> {
    let meta_path = dir.join("dataset.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| SynthError::Format {
        what: "dataset",
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(meta.fingerprint)
}

/// Load a dataset directory back into memory.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, SyntheticConfig), SynthError> {
    let meta_path = dir.join("dataset.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| SynthError::Format {
        what: "dataset",
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    let ann_path = dir.join("annotations.json");
    let ann_text = fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&ann_text).map_err(|e| SynthError::Format {
        what: "annotations",
        path: ann_path.display().to_string(),
        message: e.to_string(),
    })?;
    if ann.schema_version != ANNOTATION_SCHEMA_VERSION {
        return Err(SynthError::Annotations(format!(
            "unsupported annotation schema version {}",
            ann.schema_version
        )));
    }
    let videos = ann
        .videos
        .into_iter()
        .map(|v| {
            let (ext, is_feature) = match meta.config.mode {
                DataMode::Feature { .. } => ("talf", true),
                DataMode::Pixel { .. } => ("talp", false),
            };
            let path = dir.join("data").join(format!("{}.{ext}", v.video_id));
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let path_str = path.display().to_string();
            let (actionness, unit_length, data) = if is_feature {
                let (spatial, temporal, actionness, unit_length) =
                    decode_feature_file(&bytes, &path_str)?;
                (actionness, unit_length, VideoData::Features { spatial, temporal })
            } else {
                let (frames, flows, actionness, unit_length) =
                    decode_pixel_file(&bytes, &path_str)?;
                (actionness, unit_length, VideoData::Pixels { frames, flows })
            };
            Ok(VideoRecord {
                video_id: v.video_id,
                frames: v.frames,
                fps: v.fps,
                unit_length,
                instances: v.instances,
                actionness,
                data,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok((Dataset { videos }, meta.config))
}
