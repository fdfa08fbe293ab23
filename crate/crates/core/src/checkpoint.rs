//! `.mct` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MCT1"
//! u32                      tensor count
//! per tensor:
//!   u16 + UTF-8 bytes      name
//!   u8                     rank
//!   u32 * rank             extents
//!   u8                     dtype code (0 = f32, 1 = f64)
//!   payload                row-major little-endian values
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MCT1";

/// A checkpointed tensor, kept in f64 regardless of stored precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

pub fn encode<T: Element>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.registry().len()).map_err(|_| Error::arg("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::arg(format!("name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::arg("rank too large"))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::arg("extent too large"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(T::DTYPE.code());
        for &v in p.value.data() {
            v.to_le_bytes_into(&mut out);
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
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("checkpoint", format!("name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown dtype code {code} for `{name}`")))?;
        let n = numel(&shape);
        let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| Error::format("checkpoint", "overflow"))?)?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        entries.push(Entry { name, dtype, tensor: Tensor::new(shape, data)? });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(entries)
}

pub fn save<T: Element>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load_entries(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

/// Copies checkpoint values into `store`. Every name must match with an
/// identical shape; otherwise nothing is modified and the error lists the
/// differences.
pub fn restore<T: Element>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    let by_name: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected: BTreeSet<&str> = store.registry().specs().iter().map(|s| s.name.as_str()).collect();
    let mut problems = Vec::new();
    for spec in store.registry().specs() {
        match by_name.get(spec.name.as_str()) {
            None => problems.push(format!("missing `{}` {:?}", spec.name, spec.shape)),
            Some(e) if e.tensor.shape() != spec.shape.as_slice() => problems.push(format!(
                "shape of `{}`: model {:?}, checkpoint {:?}",
                spec.name,
                spec.shape,
                e.tensor.shape()
            )),
            Some(_) => {}
        }
    }
    for name in by_name.keys().filter(|n| !expected.contains(*n)) {
        problems.push(format!("unexpected `{name}`"));
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems.join("; ")));
    }
    for p in store.iter_mut() {
        p.value = by_name[p.name.as_str()].tensor.cast();
    }
    Ok(())
}
