//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "STYMAM1\0"
//! count     u32
//! entries   count x { name_len u32, name utf-8, rank u32, dims rank x u64, offset u64 }
//! data      f64 values; `offset` counts bytes from the start of this section
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"STYMAM1\0";

pub type Entries = Vec<(String, Tensor)>;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Entries, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed(format!("name of entry {i} is not utf-8")))?
            .to_string();
        if manifest.iter().any(|(n, _, _): &(String, _, _)| *n == name) {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(CheckpointError::Malformed(format!("tensor `{name}` has extent {d}")));
            }
            dims.push(d as usize);
        }
        let offset = r.u64("offset")?;
        manifest.push((name, dims, offset));
    }
    let data = &bytes[r.pos..];
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, dims, offset) in manifest {
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
        let start =
            usize::try_from(offset).map_err(|_| CheckpointError::Malformed(format!("offset of `{name}` overflows")))?;
        let end = numel
            .checked_mul(8)
            .and_then(|n| n.checked_add(start))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
        if end > data.len() {
            return Err(CheckpointError::Truncated(format!(
                "data of `{name}` needs {end} bytes, {} present",
                data.len()
            )));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, values).expect("extent product checked above");
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Entries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
