//! AXTN binary tensor files.
//!
//! Layout: `41 58 54 4E` ("AXTN"), version `0x01`, dtype (`0x01` f32,
//! `0x02` f64), ndim, `ndim` little-endian u32 extents, then the row-major
//! little-endian payload. Nothing follows the payload.

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AXTN";
pub const VERSION: u8 = 0x01;

/// A decoded tensor of either on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when it already matches).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::shape("axtn", format!("rank {} exceeds 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.tag());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::shape("axtn", format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<AnyTensor> {
    let bad = |msg: String| Error::format(origin, msg);
    if bytes.len() < 7 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {:#04x}", bytes[4])));
    }
    let dtype = DType::from_tag(bytes[5]).ok_or_else(|| bad(format!("unknown dtype {:#04x}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated extents".into()));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size() {
        return Err(bad(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            n * dtype.size()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
    })
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_any(path)?.into_tensor())
}
