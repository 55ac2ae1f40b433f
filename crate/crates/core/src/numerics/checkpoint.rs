//! Checkpoint directories: `manifest.json` (name → shape, dtype, byte offset)
//! plus a single little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub endianness: String,
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
}

/// Writes every parameter of `store` into `dir`, creating it if needed.
pub fn save(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for e in store.entries() {
        if !e.value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {}", e.name)));
        }
        tensors.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            trainable: e.trainable,
        });
        for &x in e.value.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        endianness: "little".into(),
        blob: BLOB_FILE.into(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

/// Reads all tensors of a checkpoint in manifest order.
pub fn load(dir: &Path) -> Result<Vec<(ManifestEntry, Tensor)>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported endianness {}",
            manifest.endianness
        )));
    }
    let bpath = dir.join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: bytes {start}..{end} exceed blob of {} bytes",
                entry.name,
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&entry.shape, data)?;
        out.push((entry, t));
    }
    Ok(out)
}

/// Loads a checkpoint into an already-built store; every stored parameter
/// must be present with a matching shape.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = load(dir)?;
    let mut seen = vec![false; store.len()];
    for (entry, t) in tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        store
            .set(id, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        seen[id.index()] = true;
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks parameter {}",
            store.entry(missing).name
        )));
    }
    Ok(())
}

/// Rounds every parameter to `f32` precision, the resolution checkpoints keep.
pub fn quantize_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = *x as f32 as f64;
        }
    }
}
