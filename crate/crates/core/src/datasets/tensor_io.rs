use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ByteReader, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"MDTF";
const TENSOR_VERSION: u32 = 1;

/// Serializes `t` as `"MDTF" | version u32 | ndim u8 | dims u32... | f32 LE payload`.
pub fn write_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::Numeric("refusing to store a non-finite tensor".into()));
    }
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} too large to store", t.ndim())));
    }
    let mut out = Vec::with_capacity(9 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("tensor file: bad magic".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "tensor file: unsupported version {version:#x}"
        )));
    }
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("tensor file: size overflow".into()))?;
    let payload = r.rest();
    if payload.len() != n {
        return Err(Error::Format(format!(
            "tensor file: shape {shape:?} needs {n} payload bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, write_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
