//! Binary checkpoint container.
//!
//! Layout: the magic bytes `MADN`, a `u32` little-endian format version, a
//! `u64` little-endian header length, a UTF-8 JSON header, then a raw
//! little-endian float payload. The header records the model config, dtype,
//! run metadata, and every tensor's name, shape, and byte extent within the
//! payload, so a file is fully self-describing.
//!
//! Writes go through a temporary sibling file followed by an atomic rename,
//! so an interrupted save never corrupts the previous checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MADN";
pub const VERSION: u32 = 1;

/// Run metadata carried alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Element type of the payload ("f32" or "f64").
    pub dtype: String,
    /// Completed training epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub learn_phi: bool,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset within the payload.
    offset: u64,
    /// Byte length within the payload.
    len: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    /// Named tensors in a stable order (model walk order, then extras such
    /// as "phi" and optimizer buffers).
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        let idx = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(idx).1)
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if ckpt.meta.dtype != T::DTYPE.name() {
        return Err(Error::checkpoint(format!(
            "meta dtype '{}' does not match payload dtype '{}'",
            ckpt.meta.dtype,
            T::DTYPE.name()
        )));
    }
    let width = T::DTYPE.byte_width() as u64;
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let len = t.numel() as u64 * width;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::checkpoint(format!("header serialization failed: {}", e)))?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &ckpt.tensors {
        for &v in t.data() {
            v.to_le_bytes(&mut out);
        }
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |msg: String| Error::checkpoint(format!("{}: {}", path.display(), msg));

    if bytes.len() < 16 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(fail("bad magic (not a checkpoint file)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!(
            "unknown format version {} (this build reads {})",
            version, VERSION
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(header_len).ok_or_else(|| {
        fail(format!("implausible header length {}", header_len))
    })?;
    if bytes.len() < payload_start {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| fail(format!("corrupt header: {}", e)))?;
    if header.meta.dtype != T::DTYPE.name() {
        return Err(fail(format!(
            "payload dtype is '{}' but '{}' was requested",
            header.meta.dtype,
            T::DTYPE.name()
        )));
    }

    let payload = &bytes[payload_start..];
    let width = T::DTYPE.byte_width();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.len as usize != numel * width {
            return Err(fail(format!(
                "tensor '{}' length {} does not match shape {:?}",
                e.name, e.len, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start.checked_add(e.len as usize).filter(|&x| x <= payload.len());
        let end = match end {
            Some(x) => x,
            None => {
                return Err(fail(format!(
                    "truncated payload: tensor '{}' extends past end of file",
                    e.name
                )))
            }
        };
        let data: Vec<T> = payload[start..end]
            .chunks_exact(width)
            .map(T::from_le_bytes)
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }

    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}
