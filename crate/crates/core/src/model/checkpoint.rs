//! Binary checkpoint format.
//!
//! ```text
//! "TFCSE1"
//! u32 config_len, config_len bytes of UTF-8 TOML (the CrnnConfig)
//! u32 n_arrays
//! n_arrays × { u16 name_len, name, u8 rank, rank × u32 dim, numel × f64 }
//! ```
//!
//! All integers and floats are little-endian. Arrays appear in
//! [`SedModel::named_arrays`] order and must match the model the config
//! describes exactly.

use std::path::Path;

use super::{CrnnConfig, SedModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"TFCSE1";

const MAX_CONFIG_BYTES: usize = 1 << 16;
const MAX_EXTENT: usize = 1 << 16;
const MAX_STAGES: usize = 8;
const MAX_WEIGHTS: usize = 1 << 27;

pub fn encode(model: &SedModel) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config())
        .map_err(|e| Error::format("checkpoint", format!("cannot serialize config: {e}")))?;
    let arrays = model.named_arrays();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Rejects configs whose model would be unreasonably large before anything
/// is allocated. Returns a lower bound on the weight count.
fn check_bounds(cfg: &CrnnConfig) -> Result<usize> {
    let extents = [
        cfg.frames,
        cfg.freq_bins,
        cfg.in_channels,
        cfg.filters,
        cfg.gru_hidden,
        cfg.fc_hidden,
        cfg.classes,
    ];
    if extents.iter().any(|&e| e > MAX_EXTENT) || cfg.pool_widths.len() > MAX_STAGES {
        return Err(Error::format("checkpoint", "model dimensions out of range"));
    }
    cfg.validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let c = cfg.stage_output_channels();
    let conv = 9 * cfg.in_channels.max(c) * cfg.filters * cfg.pool_widths.len();
    let gru = 6 * (cfg.gru_input_width()? + 2 * cfg.gru_hidden) * cfg.gru_hidden;
    let fc = (cfg.gru_hidden + cfg.classes) * cfg.fc_hidden;
    if conv + gru + fc > MAX_WEIGHTS {
        return Err(Error::format("checkpoint", "model too large"));
    }
    Ok(9 * cfg.in_channels * cfg.filters + 6 * cfg.gru_input_width()? * cfg.gru_hidden + fc)
}

pub fn decode(bytes: &[u8]) -> Result<SedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let config_len = r.u32()? as usize;
    if config_len > MAX_CONFIG_BYTES {
        return Err(Error::format("checkpoint", "config block too long"));
    }
    let text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
    let cfg: CrnnConfig =
        toml::from_str(text).map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
    let min_weights = check_bounds(&cfg)?;
    if 8 * min_weights > bytes.len() - r.pos {
        return Err(Error::format("checkpoint", "truncated weights"));
    }
    let mut model = SedModel::new(cfg)?;

    let expected: Vec<(String, Vec<usize>)> = model
        .named_arrays()
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect();
    let n_arrays = r.u32()? as usize;
    if n_arrays != expected.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} arrays, found {n_arrays}", expected.len()),
        ));
    }
    let mut targets = model.arrays_mut();
    for ((name, dims), target) in expected.iter().zip(targets.iter_mut()) {
        let len = r.u16()? as usize;
        let got = r.take(len)?;
        if got != name.as_bytes() {
            return Err(Error::format(
                "checkpoint",
                format!("expected array {name}, found {}", String::from_utf8_lossy(got)),
            ));
        }
        let rank = r.u8()? as usize;
        let mut got_dims = Vec::with_capacity(rank.min(4));
        for _ in 0..rank {
            got_dims.push(r.u32()? as usize);
        }
        if &got_dims != dims {
            return Err(Error::format(
                "checkpoint",
                format!("array {name} has dims {got_dims:?}, expected {dims:?}"),
            ));
        }
        let raw = r.take(8 * target.numel())?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format("checkpoint", format!("non-finite value in {name}")));
            }
            *dst = v;
        }
    }
    drop(targets);
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    model.mark_stats_ready();
    Ok(model)
}

pub fn save(model: &SedModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
