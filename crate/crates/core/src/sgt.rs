//! `SGT1` binary tensor files.
//!
//! Layout: the four magic bytes `SGT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the row-major payload as little-endian
//! `f32`. Tensors of rank below four are read with leading unit axes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let fmt = |m: &str| Error::Format(format!("SGT1: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let u32_at = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fmt("truncated header"))
    };
    let rank = u32_at(4)? as usize;
    if rank == 0 || rank > 4 {
        return Err(fmt(&format!("unsupported rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        dims[4 - rank + i] = u32_at(8 + 4 * i)? as usize;
    }
    let header = 8 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * len {
        return Err(fmt(&format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            payload.len(),
            4 * len
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(dims, data)
}

pub fn write<T: Float>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
