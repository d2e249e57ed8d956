//! Float64 array archives: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header naming every array and its shape, then the array
//! payloads as little-endian IEEE-754 doubles in header order.
//!
//! Checkpoints, posteriors and trajectory records all use this layout so any
//! language with a JSON parser can reload them bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BDARCH01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// An in-memory archive: free-form JSON metadata plus named arrays.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub meta: Value,
    arrays: Vec<(ArrayEntry, Vec<f64>)>,
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch { expected, got: data.len() });
        }
        if self.arrays.iter().any(|(e, _)| e.name == name) {
            return Err(Error::Format(format!("duplicate array `{name}`")));
        }
        self.arrays.push((ArrayEntry { name: name.to_owned(), shape: shape.to_vec() }, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("archive has no array `{name}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ArrayEntry> {
        self.arrays.iter().map(|(e, _)| e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { meta: self.meta.clone(), arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.arrays.iter().map(|(_, d)| d.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a bayesdiff array archive".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + header_len).ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 16 + header_len;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| Error::Format(format!("truncated array `{}`", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            cursor += 8 * n;
            arrays.push((entry, data));
        }
        if cursor != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self { meta: header.meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes a bare little-endian float64 sidecar (no header).
pub fn write_raw_f64(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}
