//! Binary tensor container.
//!
//! Layout: the 8-byte magic `FLUFTNSR`, a little-endian `u32` version (1),
//! four little-endian `u32` dimensions, then the `f32` payload in
//! little-endian order.

use std::fs;
use std::path::Path;

use crate::{Error, Result, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"FLUFTNSR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 16;

pub fn to_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::CapacityOverflow(t.shape().dims()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(8);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [word(12), word(16), word(20), word(24)].map(|d| d as usize);
    let shape = Shape::from(dims);
    let numel = shape.checked_numel().ok_or(Error::CapacityOverflow(dims))?;
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(Error::CapacityOverflow(dims))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
