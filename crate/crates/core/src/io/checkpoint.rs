//! Checkpoints: a JSON manifest listing each tensor's name, shape and byte
//! offset, next to a blob of little-endian f64 values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    config: serde_json::Value,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Run configuration the tensors belong to.
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes `manifest` and its blob. Both files are written under temporary
    /// names and renamed, so an interrupted save leaves older files intact.
    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let blob = blob_path(manifest);
        let mut bytes = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.len() * 8).sum());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let m = Manifest {
            step: self.step,
            config: self.config.clone(),
            blob: blob.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            tensors: entries,
        };
        let json = serde_json::to_vec_pretty(&m)?;
        write_atomic(&blob, &bytes)?;
        write_atomic(manifest, &json)
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: Manifest = serde_json::from_slice(&text)?;
        let blob = manifest.with_file_name(&m.blob);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in m.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 8;
            if end > bytes.len() {
                return Err(Error::Format(format!("tensor {} runs past the end of {}", e.name, blob.display())));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            step: m.step,
            config: m.config,
            tensors,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
