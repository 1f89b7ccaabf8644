//! `MVT1` tensor container: magic, `u32` little-endian header length, UTF-8
//! JSON header, then each tensor's `f32` little-endian row-major payload in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use mview_core::{Matrix, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"MVT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named `f32` tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MvtFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl MvtFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.tensors.push((name.into(), m.cast()));
    }

    pub fn get(&self, name: &str) -> CliResult<&Matrix<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CliError::Input(format!("tensor '{name}' missing from container")))
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo { name: name.clone(), rows: m.rows(), cols: m.cols(), dtype: "f32".into() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CliError::Input(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| CliError::Input("header too large".into()))?;
        let payload: usize = self.tensors.iter().map(|(_, m)| m.as_slice().len() * 4).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let bad = |msg: &str| CliError::Input(format!("malformed MVT container: {msg}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let mut offset = 8 + len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            if t.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype '{}'", t.dtype)));
            }
            let n = t.rows.checked_mul(t.cols).ok_or_else(|| bad("tensor too large"))?;
            let end = offset + n * 4;
            let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let m = Matrix::new(t.rows, t.cols, data).map_err(|e| bad(&format!("tensor '{}': {e}", t.name)))?;
            tensors.push((t.name, m));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut f = MvtFile::new(serde_json::json!({"k": 1}));
        f.push("a", &Matrix::from_rows(&[vec![1.0f64, -2.5], vec![0.125, 3.0]]).unwrap());
        f.push("b", &Matrix::from_rows(&[vec![7.0f64]]).unwrap());
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MVT1");
        let back = MvtFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let mut f = MvtFile::new(serde_json::Value::Null);
        f.push("a", &Matrix::from_rows(&[vec![1.0f64, 2.0]]).unwrap());
        let bytes = f.to_bytes().unwrap();
        assert!(MvtFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(MvtFile::from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(MvtFile::from_bytes(&extra).is_err());
    }
}
