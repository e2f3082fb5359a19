//! Manifest + raw little-endian `f32` blob persistence shared by every on-disk
//! artifact (bases, datasets, memory banks, checkpoints).
//!
//! A blob is a flat file of `f32` values. Its manifest entry records the byte
//! length, a SHA-256 digest, and a table of named tensors (shape and element
//! offset) packed inside it. Reading verifies length and digest before any
//! value is decoded.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob.
    pub offset: usize,
}

impl TensorSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
    pub tensors: Vec<TensorSlot>,
}

/// Accumulates tensors for a single blob file.
#[derive(Debug)]
pub struct BlobBuilder {
    file: String,
    data: Vec<f32>,
    tensors: Vec<TensorSlot>,
}

impl BlobBuilder {
    pub fn new(file: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            data: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: &[f32]) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::argument(format!(
                "tensor `{name}` declares shape {shape:?} ({numel} elements) but has {} values",
                values.len()
            )));
        }
        self.tensors.push(TensorSlot {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) -> Result<()> {
        let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
        self.push(name, shape, &v)
    }

    pub fn write(self, dir: &Path) -> Result<BlobEntry> {
        let bytes = f32_to_le_bytes(&self.data);
        let path = dir.join(&self.file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok(BlobEntry {
            file: self.file,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
            tensors: self.tensors,
        })
    }
}

/// Decoded contents of a verified blob.
#[derive(Debug, Clone)]
pub struct BlobContents {
    file: String,
    data: Vec<f32>,
    tensors: Vec<TensorSlot>,
}

impl BlobContents {
    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let slot = self
            .tensors
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::integrity(&self.file, format!("missing tensor `{name}`")))?;
        let end = slot.offset + slot.numel();
        if end > self.data.len() {
            return Err(Error::integrity(
                &self.file,
                format!("tensor `{name}` extends past end of blob"),
            ));
        }
        Ok((&slot.shape, &self.data[slot.offset..end]))
    }

    /// Fetch a tensor and check its shape matches `expected`.
    pub fn get_shaped(&self, name: &str, expected: &[usize]) -> Result<&[f32]> {
        let (shape, data) = self.get(name)?;
        if shape != expected {
            return Err(Error::integrity(
                &self.file,
                format!("tensor `{name}` has shape {shape:?}, expected {expected:?}"),
            ));
        }
        Ok(data)
    }

    pub fn get_f64(&self, name: &str, expected: &[usize]) -> Result<Vec<f64>> {
        Ok(self.get_shaped(name, expected)?.iter().map(|&x| x as f64).collect())
    }

    pub fn tensors(&self) -> &[TensorSlot] {
        &self.tensors
    }
}

pub fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<BlobContents> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != entry.bytes {
        return Err(Error::integrity(
            &entry.file,
            format!("length {} bytes, manifest declares {}", bytes.len(), entry.bytes),
        ));
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::integrity(&entry.file, "length is not a multiple of 4"));
    }
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(Error::integrity(&entry.file, "sha256 mismatch"));
    }
    let data = le_bytes_to_f32(&bytes);
    for slot in &entry.tensors {
        if slot.offset + slot.numel() > data.len() {
            return Err(Error::integrity(
                &entry.file,
                format!("tensor `{}` extends past end of blob", slot.name),
            ));
        }
    }
    Ok(BlobContents {
        file: entry.file.clone(),
        data,
        tensors: entry.tensors.clone(),
    })
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Digest of a value's canonical JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_vec(value).expect("serializable manifest");
    sha256_hex(&text)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Round an `f64` through `f32` so that stored and in-memory values agree.
#[inline]
pub fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BlobBuilder::new("x.f32");
        b.push("a", &[2, 2], &[1.0, 2.0, 3.0, -4.5]).unwrap();
        b.push("b", &[3], &[0.25, f32::MIN_POSITIVE, 7.0]).unwrap();
        let entry = b.write(dir.path()).unwrap();
        let c = read_blob(dir.path(), &entry).unwrap();
        assert_eq!(c.get_shaped("a", &[2, 2]).unwrap(), &[1.0, 2.0, 3.0, -4.5]);
        assert_eq!(c.get("b").unwrap().1[1], f32::MIN_POSITIVE);
        assert!(c.get_shaped("a", &[4]).is_err());

        let path = dir.path().join("x.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        match read_blob(dir.path(), &entry) {
            Err(Error::Integrity { blob, .. }) => assert_eq!(blob, "x.f32"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BlobBuilder::new("y.f32");
        b.push("a", &[1], &[1.0]).unwrap();
        let entry = b.write(dir.path()).unwrap();
        let path = dir.path().join("y.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blob(dir.path(), &entry), Err(Error::Integrity { .. })));
    }

    #[test]
    fn shape_mismatch_rejected_on_push() {
        let mut b = BlobBuilder::new("z.f32");
        assert!(b.push("a", &[3], &[1.0]).is_err());
    }
}
