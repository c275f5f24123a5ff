//! Checkpoint files: magic, JSON header, then a little-endian f32 blob.
//!
//! ```text
//! b"SISSACKP" | u32 LE header length | header JSON | f32 LE params.. buffers..
//! ```
//! The header lists every parameter and buffer (name, shape) in blob order
//! and carries the SHA-256 of the blob plus free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"SISSACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub blob_sha256: String,
    pub meta: serde_json::Value,
}

fn entries(store: &ParamStore) -> (Vec<TensorEntry>, Vec<TensorEntry>) {
    let params = store
        .params()
        .iter()
        .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    let buffers = store
        .buffers()
        .iter()
        .map(|b| TensorEntry { name: b.name.clone(), shape: b.value.shape().to_vec() })
        .collect();
    (params, buffers)
}

pub fn to_bytes(store: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(4 * (store.count() + 64));
    let values = store
        .params()
        .iter()
        .map(|p| &p.value)
        .chain(store.buffers().iter().map(|b| &b.value));
    for t in values {
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let (params, buffers) = entries(store);
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        params,
        buffers,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(NnError::Format("missing checkpoint magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| NnError::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.format != FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported format {}", header.format)));
    }
    let blob = &bytes[12 + len..];
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(NnError::Format("parameter blob hash mismatch".into()));
    }
    Ok((header, blob))
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    Ok(split(bytes)?.0)
}

/// Loads values into a store whose layout (names, shapes, order) must match.
pub fn load_into(bytes: &[u8], store: &mut ParamStore) -> Result<CheckpointHeader> {
    let (header, blob) = split(bytes)?;
    let (params, buffers) = entries(store);
    if params != header.params || buffers != header.buffers {
        return Err(NnError::Format("checkpoint layout does not match model".into()));
    }
    let total: usize = params.iter().chain(&buffers).map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(NnError::Format(format!("blob has {} bytes, want {}", blob.len(), total * 4)));
    }
    let mut vals = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = vals.next().unwrap();
        }
    }
    for b in store.buffers_mut() {
        for v in b.value.data_mut() {
            *v = vals.next().unwrap();
        }
    }
    Ok(header)
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(store, meta)?)?;
    Ok(())
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<CheckpointHeader> {
    load_into(&fs::read(path)?, store)
}
