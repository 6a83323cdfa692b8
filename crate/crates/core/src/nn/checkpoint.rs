//! Binary checkpoint container: magic, JSON header length, JSON header, then
//! every tensor as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Architecture description owned by the model that wrote the file.
    pub manifest: serde_json::Value,
    /// Quantization plan and partitions, `null` for a full-precision model.
    pub quant: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(manifest: serde_json::Value, quant: serde_json::Value, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Self {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut values = Vec::with_capacity(tensors.len());
        for (name, shape, v) in tensors {
            entries.push(TensorEntry { name, shape });
            values.push(v);
        }
        Self { header: CheckpointHeader { format_version: CHECKPOINT_VERSION, manifest, quant, tensors: entries }, values }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.header.tensors.iter().position(|t| t.name == name).map(|i| self.values[i].as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: header.format_version, expected: CHECKPOINT_VERSION });
        }
        let mut payload = &bytes[16 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 8 * expected {
            return Err(Error::Dimension(format!("checkpoint payload has {} bytes, header describes {}", payload.len(), 8 * expected)));
        }
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let (head, rest) = payload.split_at(8 * n);
            values.push(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
            payload = rest;
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
