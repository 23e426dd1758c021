//! Versioned binary checkpoints of named parameter tensors.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! magic    8 bytes  "EAFCKPT\0"
//! version  u32      1
//! count    u32      number of tensors
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes)
//!     ndim     u32, dims (ndim × u32)
//!     data     f64 × product(dims)
//! }
//! ```

use std::path::Path;

use eaf_core::model::{Model, ParamStore};
use eaf_core::tensor::Tensor;

use crate::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"EAFCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let n = n.ok_or_else(|| CliError::Checkpoint(format!("parameter {name}: shape {shape:?} overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| CliError::Checkpoint(format!("parameter {name} too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CliError::Checkpoint(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode(model.params())).map_err(|e| CliError::io(path, e))
}

/// Loads into `model`; a mismatch reports the offending parameter name.
pub fn load_into(path: &Path, model: &mut Model) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let entries = decode(&bytes)?;
    model.params_mut().load(&entries).map_err(|e| CliError::Checkpoint(e.to_string()))
}
