//! Checkpoint container: a JSON header (model config, parameter metadata,
//! dtype, byte offsets) followed by raw little-endian parameter buffers.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::tensor::{ParamStore, Scalar};

const MAGIC: &[u8; 8] = b"GAPCKPT1";

#[derive(Serialize, Deserialize)]
struct Header<C> {
    dtype: String,
    config: C,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into the data section.
    offset: u64,
    /// Number of scalar elements.
    len: u64,
}

pub fn save<S: Scalar, C: Serialize>(
    path: &Path,
    config: &C,
    store: &ParamStore<S>,
) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    for (name, param) in store.iter() {
        params.push(ParamMeta {
            name: name.clone(),
            shape: param.shape.clone(),
            trainable: param.trainable,
            offset: data.len() as u64,
            len: param.values().len() as u64,
        });
        for &v in param.values() {
            v.write_le(&mut data);
        }
    }
    let header = Header { dtype: S::DTYPE.to_string(), config, params };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    fs::write(path, out)?;
    Ok(())
}

fn split_file(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(GapError::Checkpoint("missing GAPCKPT1 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| GapError::Checkpoint("truncated header".into()))?;
    Ok((header, &bytes[16 + header_len..]))
}

pub fn load<S: Scalar, C: DeserializeOwned>(path: &Path) -> Result<(C, ParamStore<S>)> {
    let bytes = fs::read(path)?;
    let (header_json, data) = split_file(&bytes)?;
    let header: Header<C> = serde_json::from_slice(header_json)?;
    if header.dtype != S::DTYPE {
        return Err(GapError::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            S::DTYPE
        )));
    }
    let mut store = ParamStore::new();
    for meta in &header.params {
        let start = meta.offset as usize;
        let nbytes = meta.len as usize * S::BYTES;
        let raw = data
            .get(start..start + nbytes)
            .ok_or_else(|| GapError::Checkpoint(format!("truncated data for {}", meta.name)))?;
        let values: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        store.insert(&meta.name, meta.shape.clone(), values, meta.trainable)?;
    }
    Ok((header.config, store))
}

/// Reads just the dtype string so callers can dispatch before a typed load.
pub fn read_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let (header_json, _) = split_file(&bytes)?;
    let header: Header<serde_json::Value> = serde_json::from_slice(header_json)?;
    Ok(header.dtype)
}
