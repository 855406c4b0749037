//! Parameter checkpoint file.
//!
//! Little-endian binary: magic `SBTC`, version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 name, rank u32, dims (u32 each), raw f64
//! payload. The reader validates magic, version and that the byte length is
//! consumed exactly; all size fields are bounds-checked against the remaining
//! input before any allocation, so arbitrary bytes are safe to feed in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::graph::ParamStore;

pub const MAGIC: [u8; 4] = *b"SBTC";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected SBTC)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("trailing bytes after last tensor")]
    TrailingBytes,
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor `{name}`: {detail}")]
    BadTensor { name: String, detail: String },
    #[error("field {field} value {value} exceeds limit {limit}")]
    FieldTooLarge { field: &'static str, value: u64, limit: u64 },
    #[error("missing tensor `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(tensors: &[RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = c.u32("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::FieldTooLarge { field: "name length", value: name_len as u64, limit: MAX_NAME_LEN as u64 });
        }
        let name = std::str::from_utf8(c.take(name_len as usize, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = c.u32("rank")?;
        if rank > MAX_RANK {
            return Err(CheckpointError::FieldTooLarge { field: "rank", value: rank as u64, limit: MAX_RANK as u64 });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = c.u32("dim")? as u64;
            numel = numel.checked_mul(d).ok_or(CheckpointError::FieldTooLarge {
                field: "element count",
                value: u64::MAX,
                limit: (usize::MAX / 8) as u64,
            })?;
            dims.push(d as usize);
        }
        let byte_len = numel.checked_mul(8).filter(|&b| b <= c.remaining() as u64).ok_or_else(|| {
            CheckpointError::BadTensor { name: name.clone(), detail: format!("payload of {numel} values exceeds remaining bytes") }
        })?;
        let payload = c.take(byte_len as usize, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        tensors.push(RawTensor { name, dims, data });
    }
    if c.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(tensors)
}

/// Writes a store plus scalar metadata (encoded as 1x1 tensors named
/// `meta.<key>`, emitted first).
pub fn save(path: &Path, store: &ParamStore, meta: &BTreeMap<String, f64>) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(store.len() + meta.len());
    for (k, v) in meta {
        tensors.push(RawTensor { name: format!("meta.{k}"), dims: vec![1, 1], data: vec![*v] });
    }
    for (_, e) in store.iter() {
        tensors.push(RawTensor { name: e.name.clone(), dims: vec![e.rows, e.cols], data: e.data.clone() });
    }
    fs::write(path, encode(&tensors))?;
    Ok(())
}

pub struct Loaded {
    pub tensors: Vec<RawTensor>,
    pub meta: BTreeMap<String, f64>,
}

impl Loaded {
    pub fn meta_value(&self, key: &str) -> Result<f64, CheckpointError> {
        self.meta.get(key).copied().ok_or_else(|| CheckpointError::Missing(format!("meta.{key}")))
    }

    /// Fills an already-laid-out store by tensor name, validating shapes.
    pub fn fill_store(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for i in 0..store.len() {
            let id = super::graph::ParamId(i);
            let (name, rows, cols) = {
                let e = store.get(id);
                (e.name.clone(), e.rows, e.cols)
            };
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.dims != vec![rows, cols] {
                return Err(CheckpointError::BadTensor {
                    name,
                    detail: format!("shape {:?} vs expected [{rows}, {cols}]", t.dims),
                });
            }
            store.get_mut(id).data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<Loaded, CheckpointError> {
    let bytes = fs::read(path)?;
    let tensors = decode(&bytes)?;
    let mut meta = BTreeMap::new();
    for t in &tensors {
        if let Some(key) = t.name.strip_prefix("meta.") {
            if t.data.len() == 1 {
                meta.insert(key.to_string(), t.data[0]);
            }
        }
    }
    Ok(Loaded { tensors, meta })
}
