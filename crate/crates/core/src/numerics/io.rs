//! `PPRT` binary tensor files: the magic bytes `PPRT`, a little-endian `u32`
//! rank, `rank` little-endian `u32` extents, then the values as little-endian
//! `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PPRT";

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &extent in tensor.shape() {
        bytes.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Decodes a `PPRT` buffer; `path` is only used to label errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |reason: String| Error::format(path, reason);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fail("missing PPRT magic".into()));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fail(format!("truncated header at byte {at}")))
    };
    let rank = word(4)? as usize;
    if rank == 0 || rank > 8 {
        return Err(fail(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(word(8 + 4 * i)? as usize);
    }
    let body = &bytes[8 + 4 * rank..];
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail(format!("shape {shape:?} overflows")))?;
    if body.len() != len * 4 {
        return Err(fail(format!(
            "shape {shape:?} needs {} data bytes, file has {}",
            len * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "tensor file not found"),
        _ => Error::io(path, e),
    })?;
    decode_tensor(&bytes, path)
}
