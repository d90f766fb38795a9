//! Binary array encoding: magic `LQT1`, `u32` rank, `u32` dims, then
//! little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::DenseArray;
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"LQT1";

pub fn encode_array<F: Real>(array: &DenseArray<F>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(array.rank() as u32).to_le_bytes());
    for &d in array.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in array.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Decodes one array from the front of `bytes`, returning it and the number
/// of bytes consumed. `origin` only labels errors.
pub fn decode_array<F: Real>(bytes: &[u8], origin: &Path) -> Result<(DenseArray<F>, usize)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: origin.to_path_buf(),
        reason,
    };
    let mut cursor = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let chunk = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        cursor += n;
        Ok(chunk)
    };
    let magic = take(4, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let bytes_needed = shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt(format!("shape {shape:?} overflows")))?;
    let payload = take(bytes_needed, "data")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((DenseArray::new(shape, data)?, cursor))
}

pub fn write_array<F: Real>(path: &Path, array: &DenseArray<F>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * array.rank() + 4 * array.len());
    encode_array(array, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_array<F: Real>(path: &Path) -> Result<DenseArray<F>> {
    let bytes = fs::read(path)?;
    let (array, used) = decode_array(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(array)
}
