//! Binary checkpoint format.
//!
//! ```text
//! "FGLN" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 extents | f64 data
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGLN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes every entry of `store` (parameters and buffers) in name order.
pub fn write_checkpoint(store: &ParamStore, mut out: impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Contract(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse { offset: self.pos, msg: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads all entries in file order.
pub fn read_checkpoint(mut input: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected FGLN".into() });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = c.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = c.pos;
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Parse { offset: at + 2, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Parse { offset: at, msg: e.to_string() })?;
        entries.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::Parse { offset: c.pos, msg: "trailing bytes after last entry".into() });
    }
    Ok(entries)
}
