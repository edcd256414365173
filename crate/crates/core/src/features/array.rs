//! Feature array file: `"TFCARR1"`, `u8 rank`, `rank × u64 dim`, then
//! `numel × f64`, all little-endian, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"TFCARR1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 1 + 8 * (t.dims().len() + t.numel()));
    out.extend_from_slice(MAGIC);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |reason: &str| Error::format("feature array", reason.to_string());
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
    let (&rank, rest) = rest.split_first().ok_or_else(|| bad("missing rank"))?;
    let rank = rank as usize;
    if !(1..=4).contains(&rank) {
        return Err(bad("rank must be 1 to 4"));
    }
    if rest.len() < 8 * rank {
        return Err(bad("truncated dimensions"));
    }
    let (dim_bytes, payload) = rest.split_at(8 * rank);
    let mut dims = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for b in dim_bytes.chunks_exact(8) {
        let d = usize::try_from(u64::from_le_bytes(b.try_into().unwrap()))
            .map_err(|_| bad("dimension too large"))?;
        if d == 0 {
            return Err(bad("zero dimension"));
        }
        numel = numel.checked_mul(d).ok_or_else(|| bad("element count overflows"))?;
        dims.push(d);
    }
    if numel.checked_mul(8) != Some(payload.len()) {
        return Err(bad("payload size does not match dimensions"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
