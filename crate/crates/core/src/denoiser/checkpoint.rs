//! Binary checkpoint format.
//!
//! ```text
//! "KLFMCKPT"            8 bytes magic
//! manifest_len          u32, little endian
//! manifest              JSON: {"tensors": [{name, dtype, shape, byte_offset, byte_length}], "metadata": {...}}
//! payload               concatenated little-endian tensor data
//! ```
//!
//! Offsets are relative to the start of the payload. Loading validates the
//! whole file before any tensor is returned.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Params, Scalar, TransformerConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KLFMCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub config: TransformerConfig,
    pub step: usize,
    pub seed: u64,
    /// Free-form extras (smoothing, vocabulary, corpus description, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    metadata: CheckpointMetadata,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: Params<T>,
    pub metadata: CheckpointMetadata,
}

/// Serialise parameters and metadata to bytes.
pub fn encode<T: Scalar>(params: &Params<T>, metadata: &CheckpointMetadata) -> Result<Vec<u8>> {
    if metadata.config != *params.config() {
        return Err(Error::input("metadata config does not match the parameters' config"));
    }
    let mut payload = Vec::with_capacity(params.len() * T::BYTES);
    let mut tensors = Vec::new();
    for (name, slot) in params.layout().entries() {
        let start = payload.len();
        for &v in &params.data()[slot.offset..slot.offset + slot.len()] {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.into(),
            shape: slot.shape(),
            byte_offset: start,
            byte_length: payload.len() - start,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors,
        metadata: metadata.clone(),
    })?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Format("manifest larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse and validate a checkpoint. If `expected` is given, the tensor
/// inventory is checked against it instead of the stored config.
pub fn decode<T: Scalar>(bytes: &[u8], expected: Option<&TransformerConfig>) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint file".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let manifest_bytes = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format(format!("truncated manifest: need {len} bytes")))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let payload = &bytes[12 + len..];

    let cfg = expected.unwrap_or(&manifest.metadata.config).clone();
    let cfg = &cfg;
    let layout = super::transformer::ParamLayout::for_config(cfg)?;
    let mut data = vec![T::zero(); layout.total()];
    for (name, slot) in layout.entries() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if entry.shape != slot.shape() {
            return Err(Error::Shape {
                name: name.clone(),
                expected: slot.shape(),
                found: entry.shape.clone(),
            });
        }
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("tensor `{name}`: unknown dtype `{other}`"))),
        };
        if entry.byte_length != slot.len() * width {
            return Err(Error::Format(format!("tensor `{name}`: byte length {} disagrees with shape", entry.byte_length)));
        }
        let raw = payload
            .get(entry.byte_offset..entry.byte_offset + entry.byte_length)
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: payload truncated")))?;
        for (dst, chunk) in data[slot.offset..slot.offset + slot.len()].iter_mut().zip(raw.chunks_exact(width)) {
            *dst = if width == T::BYTES {
                T::read_le(chunk)
            } else if width == 4 {
                T::of(f32::read_le(chunk) as f64)
            } else {
                T::of(f64::read_le(chunk))
            };
        }
    }
    if manifest.tensors.len() != layout.entries().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config expects {}",
            manifest.tensors.len(),
            layout.entries().len()
        )));
    }
    let mut metadata = manifest.metadata;
    metadata.config = cfg.clone();
    Ok(Checkpoint {
        params: Params::from_data(cfg, data)?,
        metadata,
    })
}

/// Write through a temporary file so a crash never leaves a half-written
/// checkpoint under `path`.
pub fn save_checkpoint<T: Scalar>(params: &Params<T>, metadata: &CheckpointMetadata, path: &Path) -> Result<()> {
    let bytes = encode(params, metadata)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?, None)
}

/// Load and validate shapes against `cfg` rather than the stored config.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, cfg: &TransformerConfig) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?, Some(cfg))
}
