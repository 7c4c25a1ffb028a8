//! Binary checkpoints: named tensors with shapes, stored as little-endian
//! doubles behind a `MTCK` magic header.
//!
//! The format is deliberately plain so external tools can read it:
//!
//! ```text
//! b"MTCK"                      magic
//! u32   version (currently 1)
//! u32   tensor count
//! per tensor:
//!   u32       name byte length, then that many UTF-8 bytes
//!   u32       rank, then rank u64 dimensions
//!   f64 * n   row-major values (n = product of dimensions)
//! ```
//!
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::model::{ModelBase, NamedParam};
use crate::scalar::Real;
use crate::tensor::TensorBase;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

/// Serializes named tensors into the checkpoint byte format.
pub fn encode<F: Real>(tensors: &[NamedParam<F>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::invalid("checkpoint::encode", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for param in tensors {
        let name = param.name.as_bytes();
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::invalid("checkpoint::encode", "tensor name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = param.value.shape();
        let rank = u32::try_from(shape.len())
            .map_err(|_| Error::invalid("checkpoint::encode", "tensor rank too large"))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in param.value.data() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::invalid(
                "checkpoint::decode",
                format!(
                    "truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    self.at,
                    self.bytes.len()
                ),
            ));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes back into named tensors.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<Vec<NamedParam<F>>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("checkpoint::decode", "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid(
            "checkpoint::decode",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::invalid("checkpoint::decode", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let dim = r.u64()? as usize;
            len = len.checked_mul(dim).ok_or_else(|| {
                Error::invalid("checkpoint::decode", format!("tensor '{name}' overflows"))
            })?;
            shape.push(dim);
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(F::from_f64_lit(r.f64()?));
        }
        tensors.push(NamedParam {
            name,
            value: TensorBase::new(shape, data)?,
        });
    }
    if r.at != bytes.len() {
        return Err(Error::invalid(
            "checkpoint::decode",
            format!("{} trailing bytes after last tensor", bytes.len() - r.at),
        ));
    }
    Ok(tensors)
}

/// All model parameters as one named list: encoder tensors first, then
/// each task head's, in declaration order. This is the list the spectral
/// audit consumes.
pub fn model_tensors<F: Real>(model: &ModelBase<F>) -> Vec<NamedParam<F>> {
    let mut out = model.shared.clone();
    for head in &model.per_task {
        out.extend(head.iter().cloned());
    }
    out
}

/// Writes a model's parameters to `path`.
pub fn save_model<F: Real>(model: &ModelBase<F>, path: &Path) -> Result<()> {
    let bytes = encode(&model_tensors(model))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads named tensors from `path`.
pub fn load_tensors<F: Real>(path: &Path) -> Result<Vec<NamedParam<F>>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

/// Restores parameters into a model by name. Every tensor in the file must
/// match an existing parameter's name and shape, and every parameter must
/// be covered.
pub fn restore_model<F: Real>(model: &mut ModelBase<F>, tensors: &[NamedParam<F>]) -> Result<()> {
    use std::collections::BTreeMap;
    let mut by_name: BTreeMap<&str, &TensorBase<F>> =
        tensors.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    if by_name.len() != tensors.len() {
        return Err(Error::invalid("checkpoint::restore", "duplicate tensor names"));
    }
    let mut assign = |param: &mut NamedParam<F>| -> Result<()> {
        let value = by_name.remove(param.name.as_str()).ok_or_else(|| {
            Error::invalid(
                "checkpoint::restore",
                format!("checkpoint is missing '{}'", param.name),
            )
        })?;
        if value.shape() != param.value.shape() {
            return Err(Error::invalid(
                "checkpoint::restore",
                format!(
                    "'{}' has shape {:?} in the checkpoint but {:?} in the model",
                    param.name,
                    value.shape(),
                    param.value.shape()
                ),
            ));
        }
        param.value = value.clone();
        Ok(())
    };
    for param in &mut model.shared {
        assign(param)?;
    }
    for head in &mut model.per_task {
        for param in head {
            assign(param)?;
        }
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::invalid(
            "checkpoint::restore",
            format!("checkpoint tensor '{name}' matches no model parameter"),
        ));
    }
    Ok(())
}

/// Reads a checkpoint from `path` into a model built from `model`'s spec.
pub fn load_model<F: Real>(model: &mut ModelBase<F>, path: &Path) -> Result<()> {
    let tensors = load_tensors(path)?;
    restore_model(model, &tensors)
}
