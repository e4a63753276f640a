//! `TNSR` binary blobs.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   b"TNSR"
//! u32     version (1)
//! u32     rank
//! u64     dims[rank]
//! u32     payload element width in bytes (4 = f32, 8 = f64)
//! ...     payload, row-major
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> u32 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<usize> {
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + t.numel() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&dtype.width().to_le_bytes());
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(buf.len())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("tensor {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one blob; returns the tensor and the payload width it was stored at.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            expected: TENSOR_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "dims")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let dtype = match read_u32(r, "dtype")? {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown payload width {other}"))),
    };
    let n: usize = shape.iter().product();
    let width = dtype.width() as usize;
    let mut payload = vec![0u8; n * width];
    read_exact(r, &mut payload, "payload")?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::from_parts(shape, data), dtype))
}
