//! Binary weight archive.
//!
//! Layout, all integers little-endian: `"DRSI"`, version `u32`, entry count
//! `u32`, then per entry: name length `u32`, UTF-8 name, dtype `u8` (0 = f32),
//! rank `u8`, dims `u32 × rank`, raw f32 payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use drsi_tensor::{Param, Tensor};

use crate::error::{Error, Result};
use crate::nn::Params;

pub const MAGIC: &[u8; 4] = b"DRSI";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Archive(format!("{what} {n} does not fit in u32")))
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(entries.len(), "entry count")?.to_le_bytes());
    for e in entries {
        out.extend_from_slice(&u32_of(e.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        let rank = u8::try_from(e.dims.len()).map_err(|_| Error::Archive(format!("{}: rank too large", e.name)))?;
        out.push(rank);
        for &d in &e.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Archive("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Archive(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Archive(format!("{name}: size overflow")))?;
        let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Every parameter and buffer of `model`, in visit order.
pub fn entries<M: Params<f32> + ?Sized>(model: &M) -> Vec<Entry> {
    let mut out = Vec::new();
    model.visit(&mut |p: &Param<f32>| {
        out.push(Entry { name: p.name().to_string(), dims: p.dims().to_vec(), data: p.value().to_vec() })
    });
    out
}

/// Copies archive entries into `model`. The name sets must match exactly.
pub fn apply<M: Params<f32> + ?Sized>(model: &mut M, entries: Vec<Entry>) -> Result<()> {
    let mut by_name: BTreeMap<String, Entry> = BTreeMap::new();
    for e in entries {
        if by_name.contains_key(&e.name) {
            return Err(Error::Archive(format!("duplicate entry {}", e.name)));
        }
        by_name.insert(e.name.clone(), e);
    }
    let mut wanted = BTreeSet::new();
    model.visit(&mut |p| {
        wanted.insert(p.name().to_string());
    });
    let missing: Vec<String> = wanted.iter().filter(|n| !by_name.contains_key(*n)).cloned().collect();
    let extra: Vec<String> = by_name.keys().filter(|n| !wanted.contains(*n)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::NameMismatch { missing, extra });
    }
    let mut result = Ok(());
    model.visit_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        let e = by_name.remove(p.name()).expect("checked above");
        if e.dims != p.dims() {
            result = Err(Error::Archive(format!("{}: archive dims {:?}, model dims {:?}", e.name, e.dims, p.dims())));
            return;
        }
        result = Tensor::from_vec(p.shape(), e.data).and_then(|t| p.set_value(t)).map_err(Error::from);
    });
    result
}

pub fn save<M: Params<f32> + ?Sized>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(&entries(model))?).map_err(|e| Error::io(path, e))
}

pub fn load<M: Params<f32> + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    apply(model, decode(&bytes)?)
}
