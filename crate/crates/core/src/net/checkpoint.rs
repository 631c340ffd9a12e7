//! Parameter checkpoints: `FPCK`, a `u32` version, the JSON network
//! configuration, then named blocks of little-endian `f32` values.
//!
//! ```text
//! "FPCK" | version u32 | config_len u32 | config JSON
//! | blocks u32 | { name_len u16 | name | ndim u8 | dims u32* | data f32* }*
//! ```

use std::path::Path;

use super::config::NetConfig;
use super::params::NetParams;
use crate::error::{format_err, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &NetParams<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    let mut out = Vec::with_capacity(16 + config.len() + params.num_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.blocks().len() as u32).to_le_bytes());
    for b in params.blocks() {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(b.shape.len() as u8);
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("checkpoint is truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<NetParams<f32>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: NetConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| format_err(format!("bad checkpoint config: {e}")))?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| format_err("block name is not UTF-8"))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("block shape overflows"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| format_err("block too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blocks.push((name, shape, data));
    }
    if r.at != bytes.len() {
        return Err(format_err("trailing bytes after the last block"));
    }
    NetParams::from_blocks(&config, blocks).map_err(|e| format_err(e.to_string()))
}

pub fn save_checkpoint(params: &NetParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetParams<f32>> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
