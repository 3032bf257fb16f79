//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFRG" | version u32 | record count u64
//! per record: name length u16 | name bytes (UTF-8) | rank u8 | dims u32 × rank | f64 × numel
//! ```

use super::model::{Model, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DFRG";
pub const VERSION: u32 = 1;

pub fn encode<'a>(records: impl IntoIterator<Item = &'a NamedTensor>) -> Result<Vec<u8>> {
    let records: Vec<&NamedTensor> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Parameter(format!("tensor name '{}' too long", r.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.value.dims().len() as u8);
        for &d in r.value.dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Parameter(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in r.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = u64::from_le_bytes(r.array("record count")?);
    let mut records = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.array::<1>("rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array("dims")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let value = Tensor::new(&dims, data).map_err(|e| Error::format(at, e.to_string()))?;
        records.push(NamedTensor { name, value });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            "trailing bytes after last record",
        ));
    }
    Ok(records)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model.state())?)?;
    Ok(())
}

/// Loads a checkpoint into a model built from the matching spec.
pub fn load_into(model: &mut Model, path: &Path) -> Result<()> {
    let records = decode(&fs::read(path)?)?;
    model.load_state(records)
}
