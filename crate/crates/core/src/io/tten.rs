//! Raw tensor encoding: `"TTEN"`, a precision byte (4 or 8), a rank byte, the
//! extents as little-endian `u32`, then the little-endian row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"TTEN";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::shape(format!("rank {} cannot be encoded", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::PRECISION_CODE as usize);
    out.extend_from_slice(MAGIC);
    out.push(T::PRECISION_CODE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::shape(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

struct Header {
    precision: u8,
    shape: Vec<usize>,
    payload_start: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TTEN magic".into()));
    }
    let precision = bytes[4];
    if precision != 4 && precision != 8 {
        return Err(Error::Format(format!("unknown precision code {precision}")));
    }
    let rank = bytes[5] as usize;
    let payload_start = 6 + 4 * rank;
    if bytes.len() < payload_start {
        return Err(Error::Format("truncated TTEN extents".into()));
    }
    let shape: Vec<usize> = bytes[6..payload_start]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in {shape:?}")));
    }
    Ok(Header { precision, shape, payload_start })
}

fn payload<'a>(bytes: &'a [u8], h: &Header) -> Result<(&'a [u8], usize)> {
    let n: usize = h.shape.iter().product();
    let end = n
        .checked_mul(h.precision as usize)
        .and_then(|b| b.checked_add(h.payload_start))
        .ok_or_else(|| Error::Format("TTEN size overflow".into()))?;
    if bytes.len() < end {
        return Err(Error::Format(format!("TTEN payload truncated: need {end} bytes, have {}", bytes.len())));
    }
    Ok((&bytes[h.payload_start..end], end))
}

/// Decode one tensor stored at precision `T`. Returns the tensor and the number
/// of bytes consumed.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let h = read_header(bytes)?;
    if h.precision != T::PRECISION_CODE {
        return Err(Error::Format(format!(
            "tensor stored with {}-byte floats, expected {}",
            h.precision,
            T::PRECISION_CODE
        )));
    }
    let (data, used) = payload(bytes, &h)?;
    let values = data.chunks_exact(h.precision as usize).map(T::read_le).collect();
    Ok((Tensor::new(h.shape, values)?, used))
}

/// Decode a tensor of either precision, converting to `T`.
pub fn decode_tensor_as<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let h = read_header(bytes)?;
    if h.precision == 4 {
        let (t, n) = decode_tensor::<f32>(bytes)?;
        Ok((t.cast(), n))
    } else {
        let (t, n) = decode_tensor::<f64>(bytes)?;
        Ok((t.cast(), n))
    }
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?).map_err(|e| Error::file(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let (t, used) = decode_tensor_as(&bytes).map_err(|e| Error::file(path, e))?;
    if used != bytes.len() {
        return Err(Error::file(path, "trailing bytes after tensor"));
    }
    Ok(t)
}
