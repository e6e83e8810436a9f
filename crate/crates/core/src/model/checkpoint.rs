//! Binary checkpoint: magic, header length, JSON header, raw payloads.
//!
//! ```text
//! b"ADAVITCK" | u64 LE header length | header JSON | tensor payloads (LE)
//! ```
//!
//! The header carries the model config and one index entry per tensor with
//! its byte offset relative to the start of the payload section.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"ADAVITCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {} not found", path.display())]
    Missing { path: PathBuf },
    #[error("cannot access checkpoint {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

/// Serializes `model` to the checkpoint byte format.
pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.num_parameters() * T::BYTES);
    let mut tensors = Vec::with_capacity(model.params.len());
    for p in &model.params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: payload.len(),
        });
        for &x in p.value.data() {
            x.write_le(&mut payload);
        }
    }
    let header = Header {
        config: model.config.clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint; `path` is used only in error messages.
pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<Model<T>, CheckpointError> {
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &bytes[payload_start..];
    if payload.len() != header.payload_bytes {
        return Err(corrupt(format!(
            "header declares {} payload bytes, file has {}",
            header.payload_bytes,
            payload.len()
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| corrupt(format!("invalid config: {e}")))?;

    let mut model = Model::<T>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
    if header.tensors.len() != model.params.len() {
        return Err(corrupt(format!(
            "index lists {} tensors, config implies {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let mut expected_offset = 0;
    for (entry, param) in header.tensors.iter().zip(model.params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        if entry.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "tensor {} has dtype {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let n = param.value.numel();
        let len = n * T::BYTES;
        if entry.offset != expected_offset || entry.offset + len > payload.len() {
            return Err(corrupt(format!(
                "tensor {} has offset {} (expected {expected_offset})",
                entry.name, entry.offset
            )));
        }
        let data = payload[entry.offset..entry.offset + len]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        param.value = Tensor::new(&entry.shape, data).expect("shape checked");
        expected_offset += len;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CheckpointError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    from_bytes(&bytes, path)
}
