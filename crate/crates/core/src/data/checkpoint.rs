//! Checkpoint container.
//!
//! ```text
//! 8 bytes   magic "SSMCKPT\0"
//! u32 LE    header length N
//! N bytes   JSON header (CheckpointHeader)
//! ...       parameter blob: every tensor as little-endian f32, in header order
//! ```
//!
//! The header records the SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::ScaleSet;
use crate::net::{ArchConfig, ModelParams, ParamTensor};
use crate::train::ThresholdTable;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ArchConfig,
    pub scales: ScaleSet,
    pub thresholds: ThresholdTable,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub sha256: String,
    /// Free-form provenance, e.g. the training configuration.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub scales: ScaleSet,
    pub thresholds: ThresholdTable,
    pub meta: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.validate()?;
    let mut blob = Vec::with_capacity(4 * ckpt.params.num_params());
    let mut tensors = Vec::with_capacity(ckpt.params.tensors.len());
    for t in &ckpt.params.tensors {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
            len: t.data.len(),
        });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dtype: "f32le".into(),
        arch: ckpt.params.arch.clone(),
        scales: ckpt.scales.clone(),
        thresholds: ckpt.thresholds.clone(),
        tensors,
        blob_bytes: blob.len(),
        sha256: sha256_hex(&blob),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Splits a container into its header and blob, checking magic, version
/// and length but not the checksum.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic or truncated)"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + n)
        .ok_or_else(|| corrupt("truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(json)?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header has no format_version"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value)?;
    if header.dtype != "f32le" {
        return Err(corrupt(format!("unsupported dtype {}", header.dtype)));
    }
    let blob = &bytes[12 + n..];
    if blob.len() != header.blob_bytes {
        return Err(corrupt(format!(
            "blob has {} bytes, header declares {}",
            blob.len(),
            header.blob_bytes
        )));
    }
    Ok((header, blob))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, blob) = decode_header(bytes)?;
    let actual = sha256_hex(blob);
    if actual != header.sha256 {
        return Err(Error::Checksum {
            expected: header.sha256,
            actual,
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let end = e
            .len
            .checked_mul(4)
            .and_then(|b| b.checked_add(e.offset))
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| corrupt(format!("tensor {} exceeds the blob", e.name)))?;
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ParamTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    let params = ModelParams {
        arch: header.arch,
        tensors,
    };
    params.validate()?;
    Ok(Checkpoint {
        params,
        scales: header.scales,
        thresholds: header.thresholds,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Header of a checkpoint file, for inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_header(&bytes)?.0)
}
