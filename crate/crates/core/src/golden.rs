//! Binary tensor file format.
//!
//! All integers little-endian:
//!
//! ```text
//! "SPAT"            4 bytes magic
//! version   u32     currently 1
//! width     u32     bytes per element, 4 (f32) or 8 (f64)
//! rank      u32
//! extents   u64 x rank
//! values    width x product(extents), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SpaError};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SPAT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + T::WIDTH * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::WIDTH as u32).to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// A decoded tensor in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn width(&self) -> usize {
        match self {
            StoredTensor::F32(_) => 4,
            StoredTensor::F64(_) => 8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SpaError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_values<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let raw = r.take(n.checked_mul(T::WIDTH).ok_or_else(|| SpaError::Format("size overflow".into()))?)?;
    let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SpaError::Format("bad magic, expected SPAT".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SpaError::Format(format!("unsupported version {version}")));
    }
    let width = r.u32()?;
    let rank = r.u32()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let tensor = match width {
        4 => StoredTensor::F32(decode_values(&mut r, shape)?),
        8 => StoredTensor::F64(decode_values(&mut r, shape)?),
        w => return Err(SpaError::Format(format!("element width {w} is not 4 or 8"))),
    };
    if r.pos != bytes.len() {
        return Err(SpaError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(tensor)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        SpaError::Format(m) => SpaError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
