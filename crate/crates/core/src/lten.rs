//! LTEN1 tensor container.
//!
//! Layout: the five magic bytes `LTEN1`, a `u8` dtype code (1 = f32,
//! 2 = f64), a `u8` rank, `rank` little-endian `u64` dimensions, then the
//! row-major payload in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 5] = b"LTEN1";

#[derive(Debug, Error)]
pub enum LtenError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 5]),
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("dimension product overflows")]
    Overflow,
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> Result<(), LtenError> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, DType), LtenError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LtenError::BadMagic(magic));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0]).ok_or(LtenError::BadDType(head[0]))?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(LtenError::Overflow)?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut raw = vec![0u8; n.checked_mul(width).ok_or(LtenError::Overflow)?];
    r.read_exact(&mut raw)?;
    let data = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(shape, data).expect("length derived from shape");
    Ok((t, dtype))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<(), LtenError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor, LtenError> {
    Ok(read_tensor(BufReader::new(File::open(path)?))?.0)
}
