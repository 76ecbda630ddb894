//! Named-tensor container.
//!
//! ```text
//! "TCKP" | u32 version | u32 header length | header (key = value text)
//! u32 entry count
//! per entry: u16 name length | name | u8 rank | u32 extents.. | u64 offset | u64 length
//! data: TTEN blobs, offsets relative to the start of this section
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::tten::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: KeyValues,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

pub fn encode_checkpoint<'a, T: Scalar>(
    header: &KeyValues,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let text = header.to_text();
    let mut manifest = Vec::new();
    let mut data = Vec::new();
    let mut count = 0u32;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::arg(format!("name too long: {name}")))?;
        let blob = encode_tensor(t)?;
        manifest.extend_from_slice(&name_len.to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.push(t.rank() as u8);
        for &e in t.shape() {
            manifest.extend_from_slice(&(e as u32).to_le_bytes());
        }
        manifest.extend_from_slice(&(data.len() as u64).to_le_bytes());
        manifest.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        data.extend_from_slice(&blob);
        count += 1;
    }
    let mut out = Vec::with_capacity(16 + text.len() + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let header = KeyValues::parse(text)?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
        entries.push((name, shape, offset, len));
    }
    let data = &bytes[r.pos..];
    let mut tensors = BTreeMap::new();
    for (name, shape, offset, len) in entries {
        let blob = offset
            .checked_add(len)
            .filter(|&end| end <= data.len())
            .map(|end| &data[offset..end])
            .ok_or_else(|| Error::Format(format!("tensor {name} lies outside the data section")))?;
        let (t, used) = decode_tensor::<T>(blob).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if used != len || t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("tensor {name} disagrees with its manifest entry")));
        }
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    Ok(Checkpoint { header, tensors })
}

/// Write through a temporary file so an interrupted save leaves the old file.
pub fn save_checkpoint<'a, T: Scalar>(
    path: &Path,
    header: &KeyValues,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let bytes = encode_checkpoint(header, tensors)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::file(path, e))
}
