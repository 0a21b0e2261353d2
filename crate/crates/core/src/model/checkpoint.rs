//! Checkpoints are a JSON manifest next to a raw little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, Scalar};

const FORMAT: &str = "mutransfer-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Optimizer step the parameters were taken at.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` with the extension replaced.
pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamSet<T>, step: u64) -> Result<()> {
    let mut payload = Vec::with_capacity(params.param_count() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (spec, t) in params.iter() {
        for v in t.values() {
            payload.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        model: params.config().clone(),
        step,
        tensors,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bin = payload_path(path);
    fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back, verifying the payload checksum and every
/// tensor name and shape against the inventory implied by the stored config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointManifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    let bin = payload_path(path);
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::format(
            &bin,
            format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != manifest.payload_sha256 {
        return Err(Error::format(&bin, "payload checksum mismatch"));
    }
    let mut params = build_model::<T>(&manifest.model)?;
    if params.len() != manifest.tensors.len() {
        return Err(Error::format(path, "tensor count does not match the model config"));
    }
    let mut tensors = Vec::with_capacity(params.len());
    for (spec, entry) in params.specs().iter().zip(&manifest.tensors) {
        if spec.name != entry.name || spec.shape != entry.shape || entry.len != spec.numel() {
            return Err(Error::format(
                path,
                format!("tensor {} does not match the model config", entry.name),
            ));
        }
        let end = entry.offset + entry.len;
        if end * 4 > payload.len() {
            return Err(Error::format(path, format!("tensor {} overruns payload", entry.name)));
        }
        let values = payload[entry.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|b| T::narrow(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push(DiffTensor::new(entry.shape.clone(), values)?);
    }
    params.set_tensors(tensors).map_err(|e| match e {
        Error::ShapeMismatch { .. } => Error::format(path, e.to_string()),
        other => other,
    })?;
    Ok((params, manifest))
}
