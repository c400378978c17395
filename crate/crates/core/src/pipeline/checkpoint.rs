//! Binary parameter container: magic, little-endian header length, JSON
//! header, then every tensor as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{AlignmentModel, ModelConfig};

const MAGIC: &[u8; 8] = b"EXCAECK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub tensors: Vec<TensorHeader>,
}

pub fn encode_checkpoint(model: &AlignmentModel, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let tensors = model.tensors();
    let header = CheckpointHeader {
        model: cfg.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * tensors.iter().map(|t| t.values.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for v in t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(AlignmentModel, ModelConfig)> {
    let bad = |why: &str| Error::Validation(format!("corrupt checkpoint: {why}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut model = AlignmentModel::init(&header.model.ecs)?;
    let mut offset = 16 + len;
    {
        let mut slots = model.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the configuration"));
        }
        for ((name, dst), h) in slots.iter_mut().zip(&header.tensors) {
            let n: usize = h.shape.iter().product();
            if *name != h.name || n != dst.len() {
                return Err(bad(&format!("unexpected tensor {} {:?}", h.name, h.shape)));
            }
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset += 8 * n;
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header.model))
}

pub fn save_checkpoint(path: &Path, model: &AlignmentModel, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, cfg)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(AlignmentModel, ModelConfig)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            artifact: path.display().to_string(),
            producer: "train".into(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
