//! The `DWTS` parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DWTS"  u32 version (=1)  u32 record_count
//! record: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data[Π dims]
//! ```
//!
//! Used both for backbone convolution parameters (`conv1_1.weight`, ...)
//! and for trained similarity weights (`alpha`, `beta`).

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DWTS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl WeightRecord {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "record dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(WeightRecord {
            name: name.into(),
            dims,
            data,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub records: Vec<WeightRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::IncompatibleWeights {
                layer: what.to_string(),
                reason: format!("file truncated at byte {}", self.bytes.len()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl WeightFile {
    pub fn new(records: Vec<WeightRecord>) -> Self {
        WeightFile { records }
    }

    pub fn get(&self, name: &str) -> Option<&WeightRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing DWTS magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("<header>")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("<header>")?;
        let mut records = Vec::with_capacity(count.min(1024) as usize);
        for i in 0..count {
            let what = format!("<record {i}>");
            let len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::Format(format!("record {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8(&name)? as usize;
            let dims = (0..rank).map(|_| r.u32(&name)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?,
                &name,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            records.push(WeightRecord { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }
        Ok(WeightFile { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .records
            .iter()
            .map(|r| 2 + r.name.len() + 1 + 4 * r.dims.len() + 4 * r.data.len())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
