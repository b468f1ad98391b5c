//! Parameter serialization (format `prer-ckpt-v1`).
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.json` holds the
//! manifest — entry names, shapes, byte offsets, integer arrays (e.g. fixed
//! permutations) and a free-form `meta` document — and `<stem>.bin` is one
//! flat blob of little-endian IEEE-754 f64 values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "prer-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    int_arrays: BTreeMap<String, Vec<i64>>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

/// An in-memory checkpoint, as loaded from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
    pub int_arrays: BTreeMap<String, Vec<i64>>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Copy every stored tensor into same-named entries of `store`.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for (name, tensor) in &self.tensors {
            let id = store.find(name).ok_or_else(|| {
                Error::contract(format!("checkpoint entry {name:?} has no matching parameter"))
            })?;
            let dst = store.get_mut(id);
            if dst.shape() != tensor.shape() {
                return Err(Error::dimension(format!(
                    "checkpoint entry {name:?}: stored shape {:?}, expected {:?}",
                    tensor.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(tensor.data());
        }
        Ok(())
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Write every entry of `store` plus the given integer arrays and metadata.
pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    int_arrays: &BTreeMap<String, Vec<i64>>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for id in store.ids() {
        let tensor = store.get(id);
        entries.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            byte_offset: blob.len() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        entries,
        int_arrays: int_arrays.clone(),
        meta: meta.clone(),
    };
    let (json_path, bin_path) = paths(stem);
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut json_file = fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut json_file, &manifest)?;
    json_file.write_all(b"\n")?;
    fs::File::create(&bin_path)?.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (json_path, bin_path) = paths(stem);
    let manifest: Manifest = serde_json::from_reader(fs::File::open(&json_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: json_path,
            offset: 0,
            message: format!(
                "unsupported checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
                manifest.version
            ),
        });
    }
    let mut blob = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut blob)?;

    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.dtype != "f64" {
            return Err(Error::Format {
                path: json_path,
                offset: 0,
                message: format!("entry {:?} has unsupported dtype {:?}", entry.name, entry.dtype),
            });
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::Format {
                path: bin_path,
                offset: entry.byte_offset,
                message: format!(
                    "entry {:?} runs past the end of the blob ({} bytes)",
                    entry.name,
                    blob.len()
                ),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Checkpoint {
        tensors,
        int_arrays: manifest.int_arrays,
        meta: manifest.meta,
    })
}
