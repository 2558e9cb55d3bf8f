//! Model checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "HLDCKPT1"
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          tensor payload, raw little-endian values
//! ```
//!
//! The header is `{"config": ModelConfig, "tensors": [{"name", "shape",
//! "dtype", "offset", "nbytes"}]}` with `offset` relative to the payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HLDCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        match T::DTYPE {
            "f64" => out.extend_from_slice(&v.f64().to_le_bytes()),
            _ => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
        }
    }
}

pub fn to_bytes<T: Real>(model: &TransformerModel<T>) -> Result<Vec<u8>> {
    let width = if T::DTYPE == "f64" { 8 } else { 4 };
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.names().iter().zip(model.params()) {
        let offset = payload.len() as u64;
        encode(t, &mut payload);
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: if width == 8 { "f64" } else { "f32" }.to_string(),
            offset,
            nbytes: (t.numel() * width) as u64,
        });
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config().clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TransformerModel<T>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unsupported dtype {other}"))),
        };
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * width;
        if e.nbytes as usize != n * width || end > payload.len() {
            return Err(Error::Format(format!("tensor {} exceeds payload", e.name)));
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    TransformerModel::from_parts(header.config, named)
}

pub fn save<T: Real>(model: &TransformerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    from_bytes(&fs::read(path)?)
}
