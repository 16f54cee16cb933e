//! Bit-exact parameter checkpoints: a small binary container holding every
//! named tensor as raw little-endian `f64` values, tagged with the run's
//! configuration hash, schedule phase, and iteration.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::{ParamSet, Tensor};
use crate::train::TrainPhase;

const MAGIC: &[u8; 4] = b"TALC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("checkpoint was written for config hash {found:#018x}, expected {expected:#018x}")]
    ConfigHashMismatch { found: u64, expected: u64 },
    #[error("checkpoint parameter {name} is unknown to this model")]
    UnknownParam { name: String },
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {name}")]
    MissingParam { name: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Header of a stored checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub phase: TrainPhase,
    pub iteration: u64,
}

fn phase_tag(phase: TrainPhase) -> u8 {
    phase.index() as u8 + 1
}

fn phase_from_tag(tag: u8) -> Option<TrainPhase> {
    TrainPhase::ALL.get(tag.checked_sub(1)? as usize).copied()
}

pub fn encode_checkpoint(params: &ParamSet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&meta.config_hash.to_le_bytes());
    out.push(phase_tag(meta.phase));
    out.extend_from_slice(&meta.iteration.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    fs::write(path, encode_checkpoint(params, meta)).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CheckpointError::Malformed {
                path: self.path.to_string(),
                message: "unexpected end of file".into(),
            })?;
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint into its metadata and named tensors.
pub fn decode_checkpoint(
    bytes: &[u8],
    path: &str,
) -> Result<(CheckpointMeta, Vec<(String, Tensor)>), CheckpointError> {
    let malformed = |message: &str| CheckpointError::Malformed {
        path: path.to_string(),
        message: message.to_string(),
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(malformed("missing TALC magic"));
    }
    if r.u32()? != VERSION {
        return Err(malformed("unsupported version"));
    }
    let config_hash = r.u64()?;
    let phase = phase_from_tag(r.take(1)?[0]).ok_or_else(|| malformed("bad phase tag"))?;
    let iteration = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| malformed("parameter name is not utf-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok((
        CheckpointMeta {
            config_hash,
            phase,
            iteration,
        },
        entries,
    ))
}

/// Load a checkpoint into an existing parameter set, verifying the config
/// hash and that names and shapes line up exactly.
pub fn load_checkpoint(
    path: &Path,
    params: &mut ParamSet,
    expected_config_hash: u64,
) -> Result<CheckpointMeta, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (meta, entries) = decode_checkpoint(&bytes, &path.display().to_string())?;
    if meta.config_hash != expected_config_hash {
        return Err(CheckpointError::ConfigHashMismatch {
            found: meta.config_hash,
            expected: expected_config_hash,
        });
    }
    let mut seen = vec![false; params.len()];
    for (name, tensor) in entries {
        let id = params
            .find(&name)
            .ok_or_else(|| CheckpointError::UnknownParam { name: name.clone() })?;
        let existing = params.get(id);
        if existing.shape() != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: tensor.shape().to_vec(),
                expected: existing.shape().to_vec(),
            });
        }
        *params.get_mut(id) = tensor;
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CheckpointError::MissingParam {
            name: params.name(crate::nn::ParamId(missing)).to_string(),
        });
    }
    Ok(meta)
}
