//! Named-tensor checkpoints: a flat little-endian `f64` blob plus a JSON
//! manifest giving each tensor's name, shape, dtype and byte offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::Module;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub payload: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn save_tensors(dir: &Path, stem: &str, tensors: &[(&str, &Tensor)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, json) = paths(dir, stem);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = t.to_le_bytes();
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
            nbytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        payload: format!("{stem}.bin"),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors: entries,
    };
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(manifest)
}

pub fn load_tensors(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let (bin, json) = paths(dir, stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{}: manifest version {}", json.display(), manifest.version),
        });
    }
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{}: checksum mismatch", bin.display()),
        });
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Format {
                offset: e.offset,
                detail: format!("tensor {} has unsupported dtype {}", e.name, e.dtype),
            });
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + e.nbytes;
        if e.nbytes != 8 * n as u64 || end > blob.len() as u64 {
            return Err(Error::Truncation {
                expected: end,
                found: blob.len() as u64,
            });
        }
        let data = blob[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_module<M: Module>(module: &M, dir: &Path, stem: &str) -> Result<Manifest> {
    let params = module.parameters();
    let named: Vec<(&str, &Tensor)> = params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_tensors(dir, stem, &named)
}

/// Loads values into an already-shaped module; names and shapes must match
/// exactly. Optimizer state is reset.
pub fn load_module<M: Module>(module: &mut M, dir: &Path, stem: &str) -> Result<()> {
    let tensors = load_tensors(dir, stem)?;
    let mut params = module.parameters_mut();
    if tensors.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint {stem} has {} tensors, module expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (p, (name, t)) in params.iter_mut().zip(tensors) {
        if p.name != name {
            return Err(Error::Data(format!("checkpoint tensor `{name}` where `{}` expected", p.name)));
        }
        p.load_value(t)?;
    }
    Ok(())
}
