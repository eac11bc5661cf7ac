//! Named-tensor archive, the checkpoint payload format.
//!
//! Layout (little-endian): magic "NTAR", u32 version=1, u32 count, then per
//! tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], row-major
//! f32 data.

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NTAR";
const VERSION: u32 = 1;

pub fn write_entries(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        assert!(tensor.rank() <= u8::MAX as usize, "tensor rank too large");
        out.push(tensor.rank() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &tensor.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::UnsupportedFormat(format!(
                "tensor archive truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::UnsupportedFormat(
            "tensor archive: bad magic, expected NTAR".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(format!(
            "tensor archive version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::UnsupportedFormat("tensor archive: non-UTF8 name".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor { shape, data }));
    }
    Ok(entries)
}

/// Lookup helper over a read archive; names the missing tensor on failure.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Like `find`, also validating the expected shape.
pub fn find_shaped<'a>(entries: &'a [(String, Tensor)], name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = find(entries, name)?;
    if t.shape != shape {
        return Err(Error::ShapeMismatch(format!(
            "tensor {name}: shape {:?}, expected {:?}",
            t.shape, shape
        )));
    }
    Ok(t)
}
