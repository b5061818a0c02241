//! Checkpoint file: `LVR1`, a little-endian u64 header length, a JSON header
//! (config, vocabulary, tensor table with shapes and byte offsets), then every
//! tensor as little-endian f32 in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::vocab::Vocab;
use super::weights::ModelWeights;
use crate::error::{LvrError, Result};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    encoder_seed: u64,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes<S: Real>(weights: &ModelWeights<S>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let named = weights.named_tensors();
    for (name, t, trainable) in &named {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape.clone(), offset, trainable: *trainable });
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        config: weights.config.clone(),
        vocab: weights.vocab.clone(),
        encoder_seed: weights.encoder.seed,
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| LvrError::format(0, e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t, _) in named {
        for &x in &t.data {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    if bytes.len() < 12 {
        return Err(LvrError::format(bytes.len() as u64, "truncated checkpoint preamble"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(LvrError::format(0, "bad checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let data_start = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| LvrError::format(12, format!("header of {hlen} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| LvrError::format(12 + e.column() as u64, format!("header: {e}")))?;
    let payload = &bytes[data_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut expected = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected {
            return Err(LvrError::format(data_start as u64 + entry.offset, format!("tensor {} out of order", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(LvrError::format(
                (data_start + payload.len()) as u64,
                format!("payload truncated inside tensor {}", entry.name),
            ));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?, entry.trainable));
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(LvrError::format((data_start as u64) + expected, "trailing bytes after last tensor"));
    }
    ModelWeights::from_named(&header.config, header.vocab, named, header.encoder_seed)
}

pub fn save_checkpoint<S: Real>(weights: &ModelWeights<S>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(weights)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights<f32>> {
    checkpoint_from_bytes(&fs::read(path)?)
}
