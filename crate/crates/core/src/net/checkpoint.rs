//! Checkpoint file: a magic line, a one-line JSON header naming every tensor
//! with its shape and byte offset, then little-endian `f32` payloads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{GaitModel, ModelConfig};
use super::NetError;
use crate::graph::ChannelStats;
use crate::io::Provenance;

pub const MAGIC: &str = "skelgait-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing magic line)")]
    Magic,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("checkpoint payload is {actual} bytes, header describes {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    seed: u64,
    model: ModelConfig,
    standardizer: [ChannelStats; 2],
    classes: Option<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &GaitModel<f32>, provenance: &Provenance) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
            len: p.value.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config_hash: provenance.config_hash.clone(),
        seed: provenance.seed,
        model: model.config.clone(),
        standardizer: model.standardizer,
        classes: model.centers.map(|id| model.store.value(id).dim(0)),
        tensors,
    };
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(payload);
    out
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|b| *b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn load(bytes: &[u8]) -> Result<(GaitModel<f32>, Provenance), CheckpointError> {
    let (magic, rest) = split_line(bytes).ok_or(CheckpointError::Magic)?;
    if magic != MAGIC.as_bytes() {
        return Err(CheckpointError::Magic);
    }
    let (head, payload) = split_line(rest).ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header: Header = serde_json::from_slice(head).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut model = GaitModel::<f32>::new(header.model.clone(), 0)?;
    if let Some(classes) = header.classes {
        model.add_arcface_head(classes, 0);
    }
    model.standardizer = header.standardizer;
    if header.tensors.len() != model.store.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors listed, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let expected = header.tensors.iter().map(|t| t.offset + 4 * t.len).max().unwrap_or(0);
    if payload.len() != expected {
        return Err(CheckpointError::Truncated { expected, actual: payload.len() });
    }
    for entry in &header.tensors {
        let err = |message: String| CheckpointError::Tensor { name: entry.name.clone(), message };
        let id = model.store.find(&entry.name).ok_or_else(|| err("not part of this model".into()))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() || entry.len != p.value.len() {
            return Err(err(format!("shape {:?}, model expects {:?}", entry.shape, p.value.shape())));
        }
        let src = &payload[entry.offset..entry.offset + 4 * entry.len];
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok((model, Provenance::new(header.config_hash, header.seed)))
}
