//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes   "BLTCKPT\0"
//! hlen     u32 LE    length of the JSON header in bytes
//! header   hlen      UTF-8 JSON (CheckpointHeader)
//! payload  ...       tensors as little-endian f32, at the offsets in the header
//! ```
//!
//! Weights are kept in 64-bit floats in memory and rounded to 32 bits on
//! disk, so a round trip perturbs each parameter by at most ~6e-8 relative.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::BertModel;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"BLTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub vocab_size: usize,
    /// SHA-256 of the vocabulary file the model was trained with.
    pub vocab_sha256: String,
    pub labels: Vec<String>,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &BertModel<T>, vocab_sha256: &str, seed: u64) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.params().num_values() * 4);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let offset = payload.len();
        for v in t.values() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, byte_len: payload.len() - offset });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: *model.config(),
        vocab_size: model.vocab_size(),
        vocab_sha256: vocab_sha256.to_string(),
        labels: Label::NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &body[hlen..]))
}

/// Header only, without validating the payload.
pub fn read_header_from(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    Ok(read_header(&std::fs::read(path)?)?.0)
}

/// Parses and validates a checkpoint: version, every expected tensor present
/// with the shape implied by the header config, and byte lengths consistent.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(BertModel<T>, CheckpointHeader)> {
    let (header, payload) = read_header(bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (this reader handles {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut model = BertModel::<T>::new(header.config, header.vocab_size, header.seed)
        .map_err(|e| Error::Checkpoint(format!("header config rejected: {e}")))?;
    for (name, shape) in model.layout() {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor {name}: stored {:?}, config implies {shape:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        if entry.byte_len != 4 * n {
            return Err(Error::Checkpoint(format!(
                "tensor {name} declares {} bytes for {n} values",
                entry.byte_len
            )));
        }
        let end = entry.offset + entry.byte_len;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated inside tensor {name} (needs {end} bytes, have {})",
                payload.len()
            )));
        }
        let values: Vec<T> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let id = model.find(&name).expect("layout names come from the model");
        model.params_mut().set_values(id, &values)?;
    }
    let expected: usize = header.tensors.iter().map(|e| e.byte_len).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes but the index accounts for {expected}",
            payload.len()
        )));
    }
    Ok((model, header))
}

pub fn save_checkpoint<T: Scalar>(model: &BertModel<T>, vocab_sha256: &str, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab_sha256, seed))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(BertModel<T>, CheckpointHeader)> {
    from_bytes(&std::fs::read(path)?)
}
