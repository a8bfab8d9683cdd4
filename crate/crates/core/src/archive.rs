//! Named-tensor container used for checkpoints and extractor weights.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a JSON header
//! (`schema`, free-form `meta`, tensor index), then the raw little-endian
//! `f32` payload in index order. Serialization is deterministic, so the same
//! contents always produce the same bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSRARCH1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub schema: String,
    pub meta: serde_json::Value,
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl Archive {
    pub fn new(schema: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { schema: schema.into(), meta, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate tensor `{name}` in archive")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensor(name).ok_or_else(|| Error::contract(format!("archive has no tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let e = Entry { name: n.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header { schema: self.schema.clone(), meta: self.meta.clone(), tensors };
        let hb = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hb.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses bytes; when `schema` is given the header must match it exactly.
    pub fn from_bytes(bytes: &[u8], schema: Option<&str>) -> Result<Self> {
        let bad = |m: &str| Error::Schema { expected: "tensor archive".into(), found: m.into() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing archive magic"));
        }
        let hl = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hl).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if let Some(s) = schema {
            if header.schema != s {
                return Err(Error::Schema { expected: s.into(), found: header.schema });
            }
        }
        let data = &bytes[16 + hl..];
        let mut a = Archive::new(header.schema, header.meta);
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data.get(4 * e.offset..4 * (e.offset + n)).ok_or_else(|| bad("truncated payload"))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            a.push(e.name, Tensor::new(&e.shape, vals)?)?;
        }
        Ok(a)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, schema: Option<&str>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, schema)
    }
}
