//! Parameter checkpoints: `manifest.json` plus little-endian `weights.bin`.
//!
//! Optimizer moments, when saved, go to `optimizer.bin` with the same
//! layout (all first moments, then all second moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    pub has_optimizer_state: bool,
    pub tensors: Vec<ManifestEntry>,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn save(store: &ParameterStore, dir: &Path, with_optimizer: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let v = store.value(id);
        tensors.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: v.shape().to_vec(),
            offset: weights.len() as u64,
        });
        put_f64s(&mut weights, v.data());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        step: store.step_count(),
        has_optimizer_state: with_optimizer,
        tensors,
    };
    let path = dir.join("weights.bin");
    fs::write(&path, &weights).map_err(|e| Error::io(&path, e))?;
    if with_optimizer {
        let mut opt = Vec::with_capacity(weights.len() * 2);
        for id in store.ids() {
            put_f64s(&mut opt, store.moments(id).0);
        }
        for id in store.ids() {
            put_f64s(&mut opt, store.moments(id).1);
        }
        let path = dir.join("optimizer.bin");
        fs::write(&path, &opt).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if m.format_version != FORMAT_VERSION || m.dtype != "f64" {
        return Err(Error::format(
            &path,
            format!(
                "unsupported checkpoint version {} / dtype {}",
                m.format_version, m.dtype
            ),
        ));
    }
    Ok(m)
}

/// Loads values (and optimizer state if present) into a store whose
/// parameter names and shapes must match the checkpoint exactly.
pub fn load_into(store: &mut ParameterStore, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join("manifest.json");
    if manifest.tensors.len() != store.len() {
        return Err(Error::format(
            &mpath,
            format!(
                "checkpoint has {} tensors, model has {}",
                manifest.tensors.len(),
                store.len()
            ),
        ));
    }
    let wpath = dir.join("weights.bin");
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if weights.len() != total * 8 {
        return Err(Error::format(
            &wpath,
            format!("expected {} bytes, found {}", total * 8, weights.len()),
        ));
    }
    let mut ids = Vec::with_capacity(store.len());
    for entry in &manifest.tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::format(&mpath, format!("unknown parameter `{}`", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &mpath,
                format!(
                    "shape of `{}` is {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    store.value(id).shape()
                ),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > weights.len() {
            return Err(Error::format(&wpath, format!("`{}` runs past end of file", entry.name)));
        }
        store.set_value(id, &read_f64s(&weights[start..end]))?;
        ids.push((id, n));
    }
    store.set_step_count(manifest.step);
    if manifest.has_optimizer_state {
        let opath = dir.join("optimizer.bin");
        let opt = read_f64s(&fs::read(&opath).map_err(|e| Error::io(&opath, e))?);
        if opt.len() != 2 * total {
            return Err(Error::format(&opath, "optimizer state size mismatch"));
        }
        let mut off = 0;
        for &(id, n) in &ids {
            let m = &opt[off..off + n];
            let v = &opt[total + off..total + off + n];
            store.set_moments(id, m, v);
            off += n;
        }
    }
    store.zero_grads();
    Ok(())
}
