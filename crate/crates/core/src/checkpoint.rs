//! The "OCRK" tensor container.
//!
//! ```text
//! magic      4 bytes  "OCRK"
//! version    u32 LE   (currently 1)
//! count      u32 LE   number of tensors
//! per tensor:
//!   name_len u32 LE, name (UTF-8)
//!   rank     u32 LE
//!   dims     u64 LE × rank
//!   data     f64 LE × Π dims, row-major
//! manifest   optional: u32 LE byte length, then UTF-8 `key=value` lines
//! ```
//!
//! The manifest section carries model configuration, dataset split
//! membership, and the base-checkpoint hash of adapter files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"OCRK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [n] => Matrix::from_vec(1, *n, self.data.clone()),
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            other => Err(Error::dim("to_matrix", format!("rank {} tensor {other:?}", other.len()))),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Ordered tensors plus a key-value manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, Tensor)>,
    pub manifest: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.push(name, Tensor::from(m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Lookup(format!("tensor {name:?} not found")))?
            .to_matrix()
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("manifest key {key:?} missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if !self.manifest.is_empty() {
            let text: String = self
                .manifest
                .iter()
                .map(|(k, v)| format!("{k}={v}\n"))
                .collect();
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic (expected OCRK)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("tensor name: {e}"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|e| e.to_string())?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("tensor size overflows")?;
            let raw = r.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            c.push(name, Tensor { dims, data }).map_err(|e| e.to_string())?;
        }
        if r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(len)?).map_err(|e| format!("manifest: {e}"))?;
            c.manifest = parse_key_values(text)?;
            if r.pos != bytes.len() {
                return Err(format!("{} trailing bytes after manifest", bytes.len() - r.pos));
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut c = Container::new();
        c.push("w", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let mut expected = b"OCRK".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn manifest_round_trip() {
        let mut c = Container::new();
        c.push_matrix("m", &Matrix::identity(2)).unwrap();
        c.manifest.insert("kind".into(), "checkpoint".into());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("kind").unwrap(), "checkpoint");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Container::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").unwrap_err().contains("magic"));
        let mut bytes = Container::new().to_bytes();
        bytes[4] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().contains("version"));
        let mut c = Container::new();
        c.push_matrix("m", &Matrix::identity(3)).unwrap();
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().contains("truncated"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        c.push_matrix("a", &Matrix::zeros(1, 1)).unwrap();
        assert!(c.push_matrix("a", &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# comment\nbatch_size = 4\n\nlr=1e-5\n").unwrap();
        assert_eq!(kv["batch_size"], "4");
        assert_eq!(kv["lr"], "1e-5");
        assert!(parse_key_values("novalue").is_err());
    }
}
