//! Single-file weight container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "DFPPCKPT"
//! version u32
//! meta    u64 length + UTF-8 JSON
//! count   u32
//! count × { name: u32 len + UTF-8, dtype: u8 (0 = f32, 1 = f64),
//!           rank: u32, dims: rank × u64, data: raw elements }
//! ```
//!
//! Tensors are written at their own precision, so a save/load cycle is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DFPPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => out.push(1),
                _ => out.push(0),
            }
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::checkpoint(origin, "bad magic header"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(
                origin,
                format!("unsupported container version {version}"),
            ));
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::checkpoint(origin, format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::checkpoint(origin, "tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let t = match dtype {
                1 => {
                    let raw = r.take(n * 8)?;
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                }
                0 => {
                    let raw = r.take(n * 4)?;
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                }
                other => {
                    return Err(Error::checkpoint(origin, format!("unknown dtype tag {other}")))
                }
            };
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(origin, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::checkpoint(parent, e.to_string()))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::checkpoint(&tmp, e.to_string()))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::checkpoint(&tmp, e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        Ok(content_hash(&bytes))
    }

    /// Loads a container and returns it with the file's content hash.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let c = Self::from_bytes(&bytes, path)?;
        Ok((c, content_hash(&bytes)))
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|v| v.as_str())
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Order-stable hash of a set of tensors (names, shapes and raw values).
pub fn tensors_checksum<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for &d in t.dims() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(self.origin, "truncated container"));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
