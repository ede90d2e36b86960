//! Binary tensor files: the 8-byte magic `MRTENSR1`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRTENSR1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format("truncated tensor file".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let rank = read_u32(take(4)?);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(take(4)?));
    }
    let n: usize = shape.iter().product();
    let payload = take(4 * n)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            cur.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
