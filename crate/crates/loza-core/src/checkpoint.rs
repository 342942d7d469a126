//! Self-describing binary model snapshots.
//!
//! Layout: `b"LOZA"`, version `u32` LE, header length `u64` LE, a JSON
//! header (config, per-layer modes, tensor manifest), then each manifest
//! entry's data as consecutive `f64` little-endian words. Raw bits are
//! preserved, so encode→decode is an identity on the model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{ConfigError, LayerMode, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LOZA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    /// Fewer bytes than the structure promised.
    Truncated { need: usize, have: usize },
    TrailingBytes { extra: usize },
    Header(String),
    Config(ConfigError),
    /// Manifest entry no current model wants, or a shape that disagrees
    /// with the config.
    UnknownTensor(String),
    MissingTensor(String),
    WrongShape { name: String },
    WrongModeCount { expect: usize, got: usize },
}

impl core::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CheckpointError::BadMagic(m) => write!(f, "bad magic {m:?}"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            CheckpointError::Truncated { need, have } => {
                write!(f, "truncated: need {need} bytes, have {have}")
            }
            CheckpointError::TrailingBytes { extra } => {
                write!(f, "{extra} unexpected trailing bytes")
            }
            CheckpointError::Header(e) => write!(f, "header: {e}"),
            CheckpointError::Config(e) => write!(f, "config: {e}"),
            CheckpointError::UnknownTensor(n) => write!(f, "unknown tensor {n:?}"),
            CheckpointError::MissingTensor(n) => write!(f, "missing tensor {n:?}"),
            CheckpointError::WrongShape { name } => write!(f, "wrong shape for {name:?}"),
            CheckpointError::WrongModeCount { expect, got } => {
                write!(f, "expected {expect} layer modes, got {got}")
            }
        }
    }
}

impl core::error::Error for CheckpointError {}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    modes: Vec<LayerMode>,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

fn gate_name(i: usize) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = write!(s, "gate{i}");
    s
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    {
        let mut emit = |name: &str, t: &Tensor| {
            manifest.push(TensorMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        };
        model.visit_params(&mut emit);
        for (i, gate) in model.gates.iter().enumerate() {
            emit(&gate_name(i), gate);
        }
    }
    let header = Header {
        config: model.config.clone(),
        modes: model.modes.clone(),
        tensors: manifest,
    };
    let header_json = serde_json::to_vec(&header).expect("header is serializable");

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let need_fixed = 16;
    if bytes.len() < need_fixed {
        return Err(CheckpointError::Truncated {
            need: need_fixed,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("fixed width");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed width"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("fixed width")) as usize;
    let body_start = need_fixed + header_len;
    if bytes.len() < body_start {
        return Err(CheckpointError::Truncated {
            need: body_start,
            have: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.config.validate().map_err(CheckpointError::Config)?;
    if header.modes.len() != header.config.n_layers {
        return Err(CheckpointError::WrongModeCount {
            expect: header.config.n_layers,
            got: header.modes.len(),
        });
    }

    // Skeleton with the right shapes; every tensor gets overwritten below.
    let mut model = Model::build(header.config.clone()).map_err(CheckpointError::Config)?;
    model.modes = header.modes;

    // name -> (shape, data)
    let mut loaded: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut cursor = body_start;
    for meta in header.tensors {
        let numel: usize = meta.shape.iter().product();
        let end = cursor + numel * 8;
        if bytes.len() < end {
            return Err(CheckpointError::Truncated {
                need: end,
                have: bytes.len(),
            });
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("fixed width"))))
            .collect();
        loaded.push((meta.name, meta.shape, data));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - cursor,
        });
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>), CheckpointError> {
        let pos = loaded
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let (_, shape, data) = loaded.remove(pos);
        Ok((shape, data))
    };

    let mut failure: Option<CheckpointError> = None;
    model.visit_params_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match take(name) {
            Ok((shape, data)) => {
                if shape != t.shape() {
                    failure = Some(CheckpointError::WrongShape {
                        name: name.to_string(),
                    });
                } else {
                    t.data_mut().copy_from_slice(&data);
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for i in 0..model.config.n_layers {
        let (shape, data) = take(&gate_name(i))?;
        if shape != [1] {
            return Err(CheckpointError::WrongShape { name: gate_name(i) });
        }
        model.gates[i] = Tensor::scalar(data[0]);
    }
    if let Some((name, _, _)) = loaded.into_iter().next() {
        return Err(CheckpointError::UnknownTensor(name));
    }
    Ok(model)
}
