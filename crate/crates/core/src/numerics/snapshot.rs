//! Binary tensor snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HATT"          magic
//! u8               version (1)
//! u8               dtype (0 = f32, 1 = f64)
//! u64              rank
//! u64 × rank       dims
//! payload          row-major values in the stored dtype
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HATT";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * (1 + t.rank()) + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decodes one snapshot from the front of `bytes`, returning the tensor and
/// the number of bytes consumed. Values stored at a different precision are
/// converted to `T`.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &str) -> Result<(Tensor<T>, usize)> {
    let bad = |detail: &str| Error::Format {
        path: origin.to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(bad("missing HATT magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported snapshot version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(bad(&format!("unknown dtype byte {other}"))),
    };
    let read_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = read_u64(6)? as usize;
    if rank > 16 {
        return Err(bad(&format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u64(14 + 8 * i)? as usize);
    }
    let start = 14 + 8 * rank;
    let numel: usize = shape.iter().product();
    let end = start + numel * width;
    let payload = bytes.get(start..end).ok_or_else(|| bad("truncated payload"))?;
    let data: Vec<T> = match dtype {
        0 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        _ => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Ok((Tensor::new(shape, data)?, end))
}

pub fn write_file<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, &path.display().to_string())?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after snapshot"));
    }
    Ok(t)
}
