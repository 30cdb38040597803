//! On-disk format for [`NetworkParams`]: one binary file per named array
//! (magic, rank, dims as little-endian `u32`, then little-endian `f32` data)
//! plus `manifest.json` carrying the spec, init seed and per-file SHA-256.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LcxError, Result};
use crate::nets::NetworkParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LCXA";
pub const PARAMS_FORMAT: &str = "lcx-params-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub format: String,
    pub init_seed: u64,
    pub spec: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_array(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8], what: &str) -> Result<Tensor> {
    let corrupt = || LcxError::Digest(format!("{what}: malformed array file"));
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(corrupt)
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(corrupt());
    }
    let rank = word(4)? as usize;
    if rank > 8 {
        return Err(corrupt());
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let offset = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let body = bytes.get(offset..).ok_or_else(corrupt)?;
    if body.len() != 4 * numel {
        return Err(corrupt());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn file_name(key: &str) -> String {
    let safe: String = key
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LcxError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LcxError::io(path, e))
}

/// Writes `params` into `dir` and returns the manifest digest.
pub fn save_params(params: &NetworkParams, spec: &serde_json::Value, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| LcxError::io(dir, e))?;
    let mut arrays = Vec::with_capacity(params.arrays.len());
    for (name, t) in &params.arrays {
        let bytes = encode_array(t);
        let file = file_name(name);
        write(&dir.join(&file), &bytes)?;
        arrays.push(ArrayEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = ParamsManifest {
        format: PARAMS_FORMAT.into(),
        init_seed: params.init_seed,
        spec: spec.clone(),
        arrays,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    write(&dir.join("manifest.json"), &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_params(dir: &Path) -> Result<(NetworkParams, ParamsManifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: ParamsManifest = serde_json::from_slice(&read(&mpath)?)
        .map_err(|e| LcxError::Digest(format!("{}: {e}", mpath.display())))?;
    if manifest.format != PARAMS_FORMAT {
        return Err(LcxError::Digest(format!(
            "{}: unknown params format `{}`",
            mpath.display(),
            manifest.format
        )));
    }
    let mut arrays = BTreeMap::new();
    for entry in &manifest.arrays {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = read(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(LcxError::Digest(path.display().to_string()));
        }
        let t = decode_array(&bytes, &entry.name)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(LcxError::Digest(format!("{}: shape mismatch", path.display())));
        }
        arrays.insert(entry.name.clone(), t);
    }
    Ok((
        NetworkParams {
            arrays,
            init_seed: manifest.init_seed,
        },
        manifest,
    ))
}
