//! `MPOT` v1 binary tensor files.
//!
//! Layout: magic `MPOT`, `u32` version, `u32` ndim, `ndim` x `u64` dims, then
//! `product(dims)` x `f64` in row-major order. All integers and floats are
//! little-endian.

use std::fs;
use std::path::Path;

use super::DenseTensor;
use crate::error::{Error, Result};

pub const MPOT_MAGIC: &[u8; 4] = b"MPOT";
pub const MPOT_VERSION: u32 = 1;

pub fn write_mpot_bytes(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.order() + 8 * t.len());
    out.extend_from_slice(MPOT_MAGIC);
    out.extend_from_slice(&MPOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.order() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn read_mpot_bytes(bytes: &[u8], path: &Path) -> Result<DenseTensor> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let mut pos = 0usize;
    if take(&mut pos, 4)? != MPOT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != MPOT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if ndim == 0 {
        return Err(bad("order-0 tensor".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| bad(format!("dim {d} too large")))?);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let raw = take(&mut pos, len.checked_mul(8).ok_or_else(|| bad("too large".into()))?)?;
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::new(dims, data).map_err(|e| bad(e.to_string()))
}

pub fn write_mpot(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    fs::write(path, write_mpot_bytes(t))?;
    Ok(())
}

pub fn read_mpot(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    read_mpot_bytes(&bytes, path)
}
