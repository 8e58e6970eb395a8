//! Little-endian binary containers.
//!
//! Weight files (`LRTS`):
//!
//! ```text
//! magic "LRTS" | version u32 = 1 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | ndims u8 | dims u32 × ndims | f64 × prod(dims)
//! ```
//!
//! Dataset files (`LRSK`) share the header layout; see [`crate::data`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LRTS";
pub const DATASET_MAGIC: [u8; 4] = *b"LRSK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims, data }
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn header(magic: [u8; 4], count: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u32(FORMAT_VERSION);
        w.u32(count);
        w
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and returns the reader plus the item count.
    pub(crate) fn open(buf: &'a [u8], magic: [u8; 4]) -> Result<(Self, u32)> {
        let mut r = Self { buf, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
        }
        let count = r.u32()?;
        Ok((r, count))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("payload too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn utf8(&mut self, n: usize) -> Result<String> {
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut w = Writer::header(WEIGHTS_MAGIC, count_u32(tensors.len())?);
    for t in tensors {
        let name_len =
            u16::try_from(t.name.len()).map_err(|_| Error::Config(format!("tensor name too long: {}", t.name)))?;
        let ndims = u8::try_from(t.dims.len()).map_err(|_| Error::Config(format!("too many dims on {}", t.name)))?;
        let expected: usize = t.dims.iter().map(|&d| d as usize).product();
        if expected != t.data.len() {
            return Err(Error::Config(format!("tensor {} has {} values but dims {:?}", t.name, t.data.len(), t.dims)));
        }
        w.u16(name_len);
        w.bytes(t.name.as_bytes());
        w.u8(ndims);
        for &d in &t.dims {
            w.u32(d);
        }
        w.f64s(&t.data);
    }
    Ok(w.finish())
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let (mut r, count) = Reader::open(bytes, WEIGHTS_MAGIC)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let ndims = r.u8()? as usize;
        let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Corrupt(format!("dims of {name} overflow")))?;
        let data = r.f64s(len)?;
        out.push(Tensor { name, dims, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)?)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    decode_tensors(&fs::read(path)?)
}

pub(crate) fn count_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("count {n} exceeds u32")))
}
