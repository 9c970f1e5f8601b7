//! `AVTS` checkpoints: magic, `u32` version, `u32`-length config block of
//! `key=value` lines, `u32` tensor count, then per tensor a `u32`-length
//! UTF-8 name followed by an `AVTD` frame.

use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::features::avtf::{read_f64_frame, write_f64_frame, Reader};
use crate::util::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVTS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = params.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_f64_frame(t, &mut out);
    }
    out
}

fn parse(buf: &[u8]) -> std::result::Result<(ModelConfig, Vec<(String, crate::numerics::Tensor)>), String> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(magic)));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let n = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(n)?).map_err(|_| "config block is not UTF-8".to_string())?;
    let config = ModelConfig::from_kv(cfg_text).map_err(|e| e.to_string())?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let t = read_f64_frame(&mut r)?;
        named.push((name, t));
    }
    if !r.is_done() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok((config, named))
}

pub fn params_from_bytes(buf: &[u8], origin: &Path) -> Result<ModelParams> {
    let (config, named) = parse(buf).map_err(|m| Error::format(origin, m))?;
    ModelParams::from_named(&config, named)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&buf, path)
}
