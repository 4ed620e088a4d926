//! Binary tensor format.
//!
//! All integers and values are little-endian.
//!
//! | offset | size        | content                              |
//! |--------|-------------|--------------------------------------|
//! | 0      | 4           | magic `b"CPTN"`                      |
//! | 4      | 1           | format version, currently `1`        |
//! | 5      | 1           | precision: `0` = f32, `1` = f64      |
//! | 6      | 2           | reserved, zero                       |
//! | 8      | 4           | rank `r` (u32)                       |
//! | 12     | 8 r         | dimensions (u64 each)                |
//! | 12+8r  | n * 4 or 8  | values in row-major order            |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Precision, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPTN";
pub const VERSION: u8 = 1;

fn precision_flag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

pub fn encode<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + F::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(precision_flag(F::PRECISION));
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<F: Real, W: Write>(w: &mut W, t: &Tensor<F>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor blob: {e}")))
}

/// Read one tensor stored in precision `F`; a precision mismatch is an error.
pub fn read_tensor<F: Real, R: Read>(r: &mut R) -> Result<Tensor<F>> {
    read_tensor_impl(r, false)
}

/// Read one tensor, converting from the stored precision if necessary.
pub fn read_tensor_cast<F: Real, R: Read>(r: &mut R) -> Result<Tensor<F>> {
    read_tensor_impl(r, true)
}

fn read_tensor_impl<F: Real, R: Read>(r: &mut R, cast: bool) -> Result<Tensor<F>> {
    let mut header = [0u8; 12];
    read_exact(r, &mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", header[4])));
    }
    let stored = match header[5] {
        0 => Precision::F32,
        1 => Precision::F64,
        other => return Err(Error::Format(format!("unknown precision flag {other}"))),
    };
    if stored != F::PRECISION && !cast {
        return Err(Error::Format(format!(
            "tensor stored as {} but {} was requested",
            stored.as_str(),
            F::PRECISION.as_str()
        )));
    }
    let rank = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let width = match stored {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut raw = vec![0u8; n * width];
    read_exact(r, &mut raw)?;
    let data = match stored {
        Precision::F32 => raw.chunks(4).map(|c| F::from_f64(f32::read_le(c) as f64)).collect(),
        Precision::F64 => raw.chunks(8).map(|c| F::from_f64(f64::read_le(c))).collect(),
    };
    // from_f64 is exact when the stored precision matches F.
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}
