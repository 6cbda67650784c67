//! Single-file weight archive: magic, format version, a JSON header with
//! metadata and a tensor table, then little-endian `f32` payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HSPTARCH";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<TableEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<ArchiveTensor>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.tensors.push(ArchiveTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.iter().copied().collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Tensor::from_shape_vec(t.shape.clone(), t.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TableEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format_version: ARCHIVE_VERSION,
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a weight archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported archive version {version} (expected {ARCHIVE_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(ArchiveTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
