//! Checkpoint = JSON manifest + one flat little-endian f32 blob.
//!
//! The manifest records the model config and, per parameter, its name,
//! shape, group and byte offset into the blob. Loading rebuilds the model
//! from the config and requires the stored names and shapes to match it
//! exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Group, Tensor};
use crate::error::{Error, Result};
use crate::model::{SANet, SANetConfig};

pub const FORMAT: &str = "sanet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: SANetConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub params: Vec<ManifestEntry>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(blob)
}

/// Writes `<stem>.json` (the given path) and `<stem>.bin` beside it.
pub fn save_checkpoint(model: &SANet, manifest_path: &Path) -> Result<()> {
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(manifest_path, "checkpoint path needs a file name"))?;
    let blob_name = format!("{stem}.bin");

    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        blob: blob_name.clone(),
        params: entries,
    };
    let bpath = blob_path(manifest_path, &blob_name);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let raw = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::json(manifest_path, e))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<SANet> {
    let manifest = read_manifest(manifest_path)?;
    let mut model = SANet::new(manifest.config.clone(), 0)?;
    let bpath = blob_path(manifest_path, &manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let expected: Vec<(&str, &[usize], Group)> = model
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape(), p.group))
        .collect();
    let stored: Vec<(&str, &[usize], Group)> = manifest
        .params
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice(), e.group))
        .collect();
    if expected != stored {
        let detail = expected
            .iter()
            .zip(&stored)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
            .unwrap_or_else(|| format!("expected {} parameters, found {}", expected.len(), stored.len()));
        return Err(Error::Checkpoint(detail));
    }

    let mut updates = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        if e.bytes != numel * 4 {
            return Err(Error::Checkpoint(format!("{}: {} bytes for {numel} values", e.name, e.bytes)));
        }
        let raw = blob
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Checkpoint(format!("{}: range beyond blob end", e.name)))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        updates.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let total: usize = manifest.params.iter().map(|e| e.bytes).sum();
    if total != blob.len() {
        return Err(Error::Checkpoint(format!("blob holds {} bytes, manifest describes {total}", blob.len())));
    }
    for (name, value) in updates {
        model.params.get_mut(&name).expect("name verified above").value = value;
    }
    Ok(model)
}

/// SHA-256 over manifest bytes followed by blob bytes, hex encoded.
pub fn checkpoint_hash(manifest_path: &Path) -> Result<String> {
    let manifest = read_manifest(manifest_path)?;
    let mut h = Sha256::new();
    h.update(fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    let bpath = blob_path(manifest_path, &manifest.blob);
    h.update(fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?);
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of one file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}
