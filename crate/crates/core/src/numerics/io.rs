//! STAR tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "STAR"
//! 4       2           version, u16 LE (= 1)
//! 6       1           dtype (0 = f32)
//! 7       1           rank (1..=3)
//! 8       8 * rank    dims, u64 LE
//! ...     4 * numel   row-major f32 LE payload
//! ```
//!
//! Values are widened to f64 on load and narrowed to f32 on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Result, StarError};

pub const MAGIC: &[u8; 4] = b"STAR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a STAR byte buffer. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: String| StarError::Format {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {}", bytes[6])));
    }
    let rank = bytes[7] as usize;
    if !(1..=3).contains(&rank) {
        return Err(bad(format!("rank {rank} outside 1..=3")));
    }
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for chunk in bytes[8..header].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        shape.push(usize::try_from(d).map_err(|_| bad(format!("dim {d} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}
