//! Flat binary tensor file with a JSON manifest: little-endian f64 payload,
//! entries carry (name, shape, offset, dtype). Used by model checkpoints
//! and the item-embedding cache.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::hex_string;
use crate::error::ModelError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: String,
}

#[derive(Default)]
pub struct TensorWriter {
    entries: Vec<ManifestEntry>,
    data: Vec<u8>,
}

impl TensorWriter {
    pub fn new() -> TensorWriter {
        TensorWriter::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let offset = self.data.len();
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(ManifestEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            dtype: "f64".to_string(),
        });
    }

    pub fn push2(&mut self, name: &str, arr: &Array2<f64>) {
        self.push(name, &[arr.nrows(), arr.ncols()], arr.as_slice().unwrap());
    }

    pub fn push1(&mut self, name: &str, arr: &Array1<f64>) {
        self.push(name, &[arr.len()], arr.as_slice().unwrap());
    }

    pub fn write(self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| ModelError::io(dir.display().to_string(), e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;
        std::fs::write(&manifest_path, json)
            .map_err(|e| ModelError::io(manifest_path.display().to_string(), e))?;
        let bin_path = dir.join(TENSORS_FILE);
        std::fs::write(&bin_path, &self.data)
            .map_err(|e| ModelError::io(bin_path.display().to_string(), e))?;
        Ok(())
    }
}

pub struct TensorReader {
    entries: Vec<ManifestEntry>,
    data: Vec<u8>,
    dir: String,
}

impl TensorReader {
    pub fn open(dir: &Path) -> Result<TensorReader, ModelError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| ModelError::io(manifest_path.display().to_string(), e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| ModelError::checkpoint(dir.display().to_string(), e.to_string()))?;
        let bin_path = dir.join(TENSORS_FILE);
        let data = std::fs::read(&bin_path)
            .map_err(|e| ModelError::io(bin_path.display().to_string(), e))?;
        Ok(TensorReader { entries, data, dir: dir.display().to_string() })
    }

    fn entry(&self, name: &str) -> Result<&ManifestEntry, ModelError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::checkpoint(&self.dir, format!("missing tensor '{name}'")))
    }

    fn values(&self, entry: &ManifestEntry) -> Result<Vec<f64>, ModelError> {
        if entry.dtype != "f64" {
            return Err(ModelError::checkpoint(
                &self.dir,
                format!("tensor '{}' has unsupported dtype {}", entry.name, entry.dtype),
            ));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        let bytes = self.data.get(entry.offset..end).ok_or_else(|| {
            ModelError::checkpoint(&self.dir, format!("tensor '{}' out of bounds", entry.name))
        })?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn get2(&self, name: &str, expect: (usize, usize)) -> Result<Array2<f64>, ModelError> {
        let entry = self.entry(name)?;
        if entry.shape != [expect.0, expect.1] {
            return Err(ModelError::checkpoint(
                &self.dir,
                format!("tensor '{name}' has shape {:?}, want {expect:?}", entry.shape),
            ));
        }
        let vals = self.values(entry)?;
        Array2::from_shape_vec(expect, vals)
            .map_err(|e| ModelError::checkpoint(&self.dir, e.to_string()))
    }

    pub fn get1(&self, name: &str, expect: usize) -> Result<Array1<f64>, ModelError> {
        let entry = self.entry(name)?;
        if entry.shape != [expect] {
            return Err(ModelError::checkpoint(
                &self.dir,
                format!("tensor '{name}' has shape {:?}, want [{expect}]", entry.shape),
            ));
        }
        Ok(Array1::from(self.values(entry)?))
    }
}

/// SHA-256 of the raw tensor payload; identifies a checkpoint for cache
/// invalidation.
pub fn tensors_sha256(dir: &Path) -> Result<String, ModelError> {
    let bin_path = dir.join(TENSORS_FILE);
    let data =
        std::fs::read(&bin_path).map_err(|e| ModelError::io(bin_path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    Ok(hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TensorWriter::new();
        let m = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 * 10.0 + j as f64);
        let v = Array1::from(vec![1.5, -2.5, 0.0]);
        w.push2("weights", &m);
        w.push1("bias", &v);
        w.write(dir.path()).unwrap();

        let r = TensorReader::open(dir.path()).unwrap();
        assert_eq!(r.get2("weights", (3, 2)).unwrap(), m);
        assert_eq!(r.get1("bias", 3).unwrap(), v);
        assert!(r.get2("weights", (2, 3)).is_err());
        assert!(r.get1("nope", 3).is_err());
    }

    #[test]
    fn hash_tracks_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TensorWriter::new();
        w.push1("x", &Array1::from(vec![1.0, 2.0]));
        w.write(dir.path()).unwrap();
        let h1 = tensors_sha256(dir.path()).unwrap();

        let mut w = TensorWriter::new();
        w.push1("x", &Array1::from(vec![1.0, 3.0]));
        w.write(dir.path()).unwrap();
        let h2 = tensors_sha256(dir.path()).unwrap();
        assert_ne!(h1, h2);
    }
}
