//! Raw tensor dumps: `u64 rank`, `rank × u64 dims`, then the little-endian
//! `f64` payload in row-major order. Complex data carries a trailing
//! dimension of 2 (real, imaginary).

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub fn write_tensor<W: Write>(out: &mut W, dims: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} describe {expected} values, got {}",
            data.len()
        )));
    }
    out.write_all(&(dims.len() as u64).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = read_u64(input)? as usize;
    if rank > 16 {
        return Err(Error::Shape(format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u64(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((dims, data))
}
