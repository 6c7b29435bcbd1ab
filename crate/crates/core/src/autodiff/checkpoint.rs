//! Versioned binary checkpoints for parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"DSHDCKP1"
//! count   u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims: rank x u32
//!   values   numel x f64 (little-endian bit patterns)
//! ```
//!
//! The writer is deterministic: identical parameter sets produce identical
//! bytes. Frozen flags and gradients are runtime state and are not stored.

use std::path::Path;

use super::{AdError, ParamSet, Result, Tensor};

const MAGIC: &[u8; 8] = b"DSHDCKP1";

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path.as_ref(), bytes)
        .map_err(|e| AdError::DomainError(format!("checkpoint write failed: {e}")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| AdError::DomainError(format!("checkpoint read failed: {e}")))?;
    let bad = |msg: &str| AdError::DomainError(format!("corrupt checkpoint: {msg}"));
    if bytes.len() < 12 || &bytes[0..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut off = 8usize;
    let mut read_u32 = |off: &mut usize| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(bad("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let count = read_u32(&mut off)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut off)? as usize;
        if off + name_len > bytes.len() {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| bad("name not UTF-8"))?
            .to_string();
        off += name_len;
        let rank = read_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + numel * 8 > bytes.len() {
            return Err(bad("truncated values"));
        }
        let values: Vec<f64> = bytes[off..off + numel * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        off += numel * 8;
        params.push(name, Tensor::new(shape, values)?);
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}
