//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CYCKPT\0\0"
//! version    u32      currently 1
//! meta_len   u32      length of the UTF-8 metadata string that follows
//! meta       bytes
//! count      u32      number of tensor entries
//! entry*     name_len u32, name bytes, ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! ```

use std::path::Path;

use super::param::Module;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CYCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Self {
        Checkpoint {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
    }

    /// Appends every parameter of `module`, prefixing names with `prefix`.
    pub fn add_module<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) {
        for p in module.params() {
            self.push(format!("{prefix}{}", p.name()), p.shape(), p.data().to_vec());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies stored values into `module`. Every parameter must be present
    /// with a matching shape.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        for p in module.params_mut() {
            let key = format!("{prefix}{}", p.name());
            let e = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if e.shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    e.shape,
                    p.shape()
                )));
            }
            p.set_data(e.values.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            entries.push(Entry {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
