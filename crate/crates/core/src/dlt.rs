//! `DLT1` binary tensor files.
//!
//! Layout: magic `b"DLT1"`, one byte rank, `rank` little-endian `u32` dims,
//! then the row-major little-endian `f32` payload. Nothing follows the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLT1";

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a DLT1 buffer; `file` only labels errors.
pub fn decode(bytes: &[u8], file: &Path) -> Result<Tensor<f32>> {
    let fail = |offset: usize, detail: String| Error::Format {
        file: file.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 5 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let rank = bytes[4] as usize;
    let mut pos = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fail(pos, "truncated dimension list".into()))?;
        let d = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail(pos, "zero-sized dimension".into()));
        }
        shape.push(d);
        pos += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(5, "dimension product overflows".into()))?;
    let expected = numel
        .checked_mul(4)
        .and_then(|b| b.checked_add(pos))
        .ok_or_else(|| fail(5, "payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: need {expected} bytes, have {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(pos + 4 * k, "non-finite element".into()));
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn write(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
