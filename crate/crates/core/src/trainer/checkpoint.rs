//! Checkpoint directories: `manifest.json` plus a raw little-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::numeric::{ParamStore, Tensor};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub dtype: String,
    pub config_hash: String,
    pub run_config: RunConfig,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

pub fn manifest_for(params: &ParamStore, step: usize, run: &RunConfig) -> Manifest {
    let mut offset = 0;
    let arrays = params
        .iter()
        .map(|(name, t)| {
            let len = t.numel() * 4;
            let e = ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len };
            offset += len;
            e
        })
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        step,
        dtype: "f32le".into(),
        config_hash: run.hash(),
        run_config: run.clone(),
        arrays,
    }
}

pub fn save_checkpoint(params: &ParamStore, step: usize, run: &RunConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_for(params, step, run);
    let mut payload = Vec::with_capacity(manifest.arrays.iter().map(|a| a.len).sum());
    for t in params.values() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let ppath = dir.join(PAYLOAD_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    std::fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::Manifest(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut params = ParamStore::new();
    for a in &manifest.arrays {
        let numel: usize = a.shape.iter().product();
        if a.len != numel * 4 {
            return Err(Error::Manifest(format!(
                "array `{}` declares {} bytes for shape {:?}",
                a.name, a.len, a.shape
            )));
        }
        let end = a.offset + a.len;
        if end > payload.len() {
            return Err(Error::Manifest(format!(
                "payload truncated: array `{}` needs bytes {}..{end}, file has {}",
                a.name,
                a.offset,
                payload.len()
            )));
        }
        let data = payload[a.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(a.shape.clone(), data).map_err(|e| Error::Manifest(format!("array `{}`: {e}", a.name)))?;
        params.insert(a.name.clone(), t);
    }
    let expected: usize = manifest.arrays.iter().map(|a| a.len).sum();
    if payload.len() != expected {
        return Err(Error::Manifest(format!("payload has {} bytes, manifest describes {expected}", payload.len())));
    }
    Ok(Checkpoint { manifest, params })
}
