//! Named-tensor container: a JSON manifest of `{name, shape, dtype,
//! byte_offset}` entries plus one contiguous little-endian blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{DType, Real, Tensor};
use crate::error::{LayaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn blob_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.byte_offset + t.shape.iter().product::<usize>() * t.dtype.size())
            .max()
            .unwrap_or(0)
    }
}

/// Serializes tensors in iteration order.
pub fn encode<'a, F: Real>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> (Manifest, Vec<u8>) {
    let mut manifest = Manifest::default();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: F::DTYPE,
            byte_offset: blob.len(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    (manifest, blob)
}

/// Decodes every tensor, converting to `F` when the stored dtype differs.
pub fn decode<F: Real>(
    manifest: &Manifest,
    blob: &[u8],
    path: &Path,
) -> Result<BTreeMap<String, Tensor<F>>> {
    let mut out = BTreeMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.byte_offset + numel * entry.dtype.size();
        if end > blob.len() {
            return Err(LayaError::Format {
                path: path.to_path_buf(),
                message: format!(
                    "tensor `{}` needs bytes [{}, {}) but blob has {}",
                    entry.name,
                    entry.byte_offset,
                    end,
                    blob.len()
                ),
            });
        }
        let bytes = &blob[entry.byte_offset..end];
        let data: Vec<F> = match entry.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| F::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        out.insert(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data)?);
    }
    Ok(out)
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save<'a, F: Real>(
    dir: &Path,
    stem: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LayaError::io(dir, e))?;
    let (manifest, blob) = encode(tensors);
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&bin, blob).map_err(|e| LayaError::io(&bin, e))?;
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| LayaError::io(&json, e))?;
    Ok(())
}

pub fn load<F: Real>(dir: &Path, stem: &str) -> Result<BTreeMap<String, Tensor<F>>> {
    let json = dir.join(format!("{stem}.json"));
    let bin = dir.join(format!("{stem}.bin"));
    let text = fs::read(&json).map_err(|e| LayaError::io(&json, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| LayaError::Format {
        path: json.clone(),
        message: e.to_string(),
    })?;
    let blob = fs::read(&bin).map_err(|e| LayaError::io(&bin, e))?;
    decode(&manifest, &blob, &bin)
}
