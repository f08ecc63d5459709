//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! one blob of little-endian f64 arrays. Every manifest entry records the
//! array's name, shape, and byte offset into the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    pub blob_bytes: u64,
}

pub fn to_bytes(params: &ParamSet, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(params.numel() * 8);
    let mut arrays = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        arrays,
        blob_bytes: blob.len() as u64,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, Manifest)> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("file shorter than its header".into()))?;
    let json_len = u64::from_le_bytes(header) as usize;
    let json = bytes
        .get(8..8 + json_len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::json("checkpoint manifest", e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = &bytes[8 + json_len..];
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let raw = blob
            .get(start..start + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("array {} overruns the blob", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|_| Error::Checkpoint(format!("array {} has an invalid shape", entry.name)))?;
        params.add(entry.name.clone(), tensor)?;
    }
    Ok((params, manifest))
}

pub fn save(path: &Path, params: &ParamSet, config: &serde_json::Value) -> Result<()> {
    let bytes = to_bytes(params, config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamSet, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads arrays into `target`, requiring every name and shape to match.
///
/// Nothing is written unless the whole file matches.
pub fn load_into(path: &Path, target: &mut ParamSet) -> Result<Manifest> {
    let (loaded, manifest) = load(path)?;
    target.copy_from(&loaded)?;
    Ok(manifest)
}
