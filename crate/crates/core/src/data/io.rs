//! Volume files: a JSON manifest next to two raw payloads.
//!
//! `<id>.json` names the payloads. `<id>.slices.bin` is an 8-byte magic
//! followed by little-endian f32 values, slice-major. `<id>.masks.bin` is an
//! 8-byte magic followed by one byte per pixel, organ-major in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use metaseg_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use super::volume::{Chunk, ChunkedVolume};
use crate::error::{Error, Result};

pub const VOLUME_VERSION: u32 = 1;
pub const SLICES_MAGIC: &[u8; 8] = b"MSGSLC1\0";
pub const MASKS_MAGIC: &[u8; 8] = b"MSGMSK1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeManifest {
    pub version: u32,
    pub id: String,
    /// `[n_slices, height, width]`.
    pub shape: [usize; 3],
    pub organs: Vec<String>,
    pub chunking: Vec<Chunk>,
    pub slices_file: String,
    pub masks_file: String,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes the three files into `dir` and returns the manifest path.
pub fn save_volume(dir: &Path, v: &ChunkedVolume) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = v.size();
    let manifest = VolumeManifest {
        version: VOLUME_VERSION,
        id: v.id.clone(),
        shape: [v.n_slices(), h, w],
        organs: v.organ_names(),
        chunking: v.chunks.clone(),
        slices_file: format!("{}.slices.bin", v.id),
        masks_file: format!("{}.masks.bin", v.id),
    };
    let mut slices = Vec::with_capacity(8 + 4 * v.n_slices() * h * w);
    slices.extend_from_slice(SLICES_MAGIC);
    for s in &v.slices {
        for &x in s.data() {
            slices.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut masks = Vec::with_capacity(8 + manifest.organs.len() * v.n_slices() * h * w);
    masks.extend_from_slice(MASKS_MAGIC);
    for organ in &manifest.organs {
        for m in &v.organs[organ] {
            masks.extend_from_slice(m.data());
        }
    }
    write(&dir.join(&manifest.slices_file), &slices)?;
    write(&dir.join(&manifest.masks_file), &masks)?;
    let path = dir.join(format!("{}.json", v.id));
    write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn payload<'a>(bytes: &'a [u8], magic: &[u8; 8], expected: usize, file: &str) -> Result<&'a [u8]> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        let offset = bytes
            .iter()
            .zip(magic)
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len().min(8));
        return Err(Error::format(file, offset as u64, "bad magic header"));
    }
    let body = &bytes[8..];
    if body.len() != expected {
        return Err(Error::format(
            file,
            (8 + body.len().min(expected)) as u64,
            format!("payload has {} bytes, manifest implies {expected}", body.len()),
        ));
    }
    Ok(body)
}

/// Reads a volume from its manifest path. Nothing is returned unless every
/// file is complete and consistent.
pub fn load_volume(manifest_path: &Path) -> Result<ChunkedVolume> {
    let text = read(manifest_path)?;
    let manifest: VolumeManifest = serde_json::from_slice(&text)?;
    if manifest.version != VOLUME_VERSION {
        return Err(Error::Migration {
            found: manifest.version,
            expected: VOLUME_VERSION,
        });
    }
    let [n, h, w] = manifest.shape;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(&manifest.id, 0, "manifest shape has a zero extent"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let plane = h * w;

    let raw = read(&dir.join(&manifest.slices_file))?;
    let body = payload(&raw, SLICES_MAGIC, 4 * n * plane, &manifest.slices_file)?;
    let mut slices = Vec::with_capacity(n);
    for s in 0..n {
        let data = body[4 * s * plane..4 * (s + 1) * plane]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        slices.push(Tensor::new([h, w], data)?);
    }

    let raw = read(&dir.join(&manifest.masks_file))?;
    let body = payload(
        &raw,
        MASKS_MAGIC,
        manifest.organs.len() * n * plane,
        &manifest.masks_file,
    )?;
    let mut organs = BTreeMap::new();
    for (o, name) in manifest.organs.iter().enumerate() {
        let mut stack = Vec::with_capacity(n);
        for s in 0..n {
            let start = (o * n + s) * plane;
            let bytes = body[start..start + plane].to_vec();
            if let Some(bad) = bytes.iter().position(|&b| b > 1) {
                return Err(Error::format(
                    &manifest.masks_file,
                    (8 + start + bad) as u64,
                    "mask byte is neither 0 nor 1",
                ));
            }
            stack.push(Mask::new(h, w, bytes)?);
        }
        organs.insert(name.clone(), stack);
    }

    let mut covered = 0;
    for c in &manifest.chunking {
        if c.start != covered || c.end <= c.start || !c.contains(c.support) {
            return Err(Error::format(&manifest.id, 0, format!("invalid chunk {c:?}")));
        }
        covered = c.end;
    }
    if covered != n {
        return Err(Error::format(&manifest.id, 0, "chunks do not cover every slice"));
    }

    Ok(ChunkedVolume {
        id: manifest.id,
        slices,
        organs,
        chunks: manifest.chunking,
    })
}

/// Every volume manifest directly inside `dir`, sorted by file name. Other
/// JSON files (checkpoints, configs) are passed over.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json")
            && serde_json::from_slice::<VolumeManifest>(&read(&path)?).is_ok()
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
