//! Checkpoint files: `<name>.json` manifest plus `<name>.bin` blob.
//!
//! The blob is an 8-byte magic followed by little-endian f64 values, one
//! tensor after another in manifest order. Offsets are byte offsets into the
//! blob, counted after the magic.

use std::fs;
use std::path::{Path, PathBuf};

use metaseg_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::init_model;
use crate::params::{ParamSet, Tag};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 8] = b"MSGCKP1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub frozen: bool,
    /// Hex sha256 of the tensor's bytes in the blob.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(blob)
}

/// Writes the manifest at `path` and the blob beside it.
pub fn save_checkpoint(path: &Path, config: &Config, params: &ParamSet) -> Result<Checkpoint> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no file name", path.display())))?;
    let blob_name = format!("{}.bin", stem.to_string_lossy());
    let mut blob = BLOB_MAGIC.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let bytes = p.tensor.to_le_bytes();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            offset: (blob.len() - BLOB_MAGIC.len()) as u64,
            frozen: p.tag == Tag::Frozen,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        blob: blob_name,
        tensors,
    };
    let bp = blob_path(path, &ckpt.blob);
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    fs::write(path, serde_json::to_string_pretty(&ckpt)?).map_err(|e| Error::io(path, e))?;
    Ok(ckpt)
}

/// Reads and verifies a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, ParamSet)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value)?;
    let bp = blob_path(path, &ckpt.blob);
    let raw = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if raw.len() < BLOB_MAGIC.len() || &raw[..BLOB_MAGIC.len()] != BLOB_MAGIC {
        return Err(Error::format(&ckpt.blob, 0, "bad magic header"));
    }
    let body = &raw[BLOB_MAGIC.len()..];
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for t in &ckpt.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 8 * n;
        if t.offset != expected_offset || end > body.len() {
            return Err(Error::format(
                &ckpt.blob,
                (BLOB_MAGIC.len() + start) as u64,
                format!("tensor `{}` does not fit the blob", t.name),
            ));
        }
        let bytes = &body[start..end];
        if hex::encode(Sha256::digest(bytes)) != t.sha256 {
            return Err(Error::Integrity(format!("hash mismatch for tensor `{}`", t.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let tag = if t.frozen { Tag::Frozen } else { Tag::Trainable };
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, tag)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != body.len() {
        return Err(Error::format(
            &ckpt.blob,
            BLOB_MAGIC.len() as u64 + expected_offset,
            "trailing bytes after the last tensor",
        ));
    }
    Ok((ckpt, params))
}

/// Loads a checkpoint and checks it against the layout `cfg` implies.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<ParamSet> {
    let (_, params) = load_checkpoint(path)?;
    let template = init_model(cfg, 0)?;
    let mut problems = Vec::new();
    for (name, p) in template.iter() {
        match params.get(name) {
            Err(_) => problems.push(format!("`{name}` missing")),
            Ok(q) if q.tensor.shape() != p.tensor.shape() => problems.push(format!(
                "`{name}` has shape {:?}, config expects {:?}",
                q.tensor.shape(),
                p.tensor.shape()
            )),
            Ok(q) if q.tag != p.tag => {
                problems.push(format!("`{name}` has tag {:?}, config expects {:?}", q.tag, p.tag))
            }
            Ok(_) => {}
        }
    }
    for name in params.names().filter(|n| !template.contains(n)) {
        problems.push(format!("`{name}` unexpected"));
    }
    if !problems.is_empty() {
        return Err(Error::Shape(format!(
            "checkpoint does not match config: {}",
            problems.join("; ")
        )));
    }
    Ok(params)
}

/// Sha256 over the manifest (minus the blob file name) and the blob bytes,
/// so identical contents hash alike wherever they are saved.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let manifest = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ckpt: Checkpoint = serde_json::from_slice(&manifest)?;
    let bp = blob_path(path, &ckpt.blob);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    ckpt.blob.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ckpt)?);
    h.update(&blob);
    Ok(hex::encode(h.finalize()))
}
