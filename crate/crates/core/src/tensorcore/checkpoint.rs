//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic  "CTRLCKPT"
//! 8 bytes   header length in bytes, u64 little-endian
//! n bytes   UTF-8 JSON header
//! ...       tensor payload, f32 little-endian, in header order
//! ```
//!
//! The header records, per tensor, its name, shape, byte offset into the
//! payload and trainable flag, plus the format version and a free-form
//! `meta` object owned by the caller (model kind, variant, architecture).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CTRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: Value,
    tensors: Vec<TensorRecord>,
}

/// A decoded checkpoint: caller metadata and the parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Value,
    pub params: ParamStore,
}

pub fn encode(meta: &Value, params: &ParamStore) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, e)| {
            let rec = TensorRecord {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                offset,
                trainable: e.trainable,
            };
            offset += 4 * e.value.len() as u64;
            rec
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, e) in params.iter() {
        for v in e.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format("checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for rec in header.tensors {
        if rec.offset != expected_offset {
            return Err(Error::format(format!("tensor `{}` has a bad offset", rec.name)));
        }
        let len: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + 4 * len;
        if end > payload.len() {
            return Err(Error::format(format!("tensor `{}` is truncated", rec.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(rec.shape, data).map_err(|e| Error::format(e.to_string()))?;
        params
            .insert(rec.name, value, rec.trainable)
            .map_err(|e| Error::format(e.to_string()))?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
    })
}

pub fn save(path: &Path, meta: &Value, params: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(meta, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
