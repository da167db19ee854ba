//! Checkpoint files.
//!
//! Layout: `"SCCK"`, `version: u16`, `step: u64`, `n_params: u32`, then per
//! parameter `name_len: u16`, the UTF-8 name and an array record. The
//! optimizer section is `adam_step: u64`, `n_moments: u32` and per entry a
//! name followed by the `m` and `v` records. The config snapshot is a
//! `u32`-length JSON document. A SHA-256 digest of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::arrayfile::{Array, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Param(format!("parameter name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    Array::f32(t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?)?.write_to(buf)?;
    Ok(())
}

fn get_name(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u16()? as usize;
    String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))
}

fn get_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let a = Array::read_from(r)?;
    let dims = a.dims.clone();
    Ok(Tensor::from_vec(a.into_f32()?, dims, &Device::Cpu)?)
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    let vars = state.model.store.vars();
    buf.extend_from_slice(&(vars.len() as u32).to_le_bytes());
    for (name, var) in &vars {
        put_name(&mut buf, name)?;
        put_tensor(&mut buf, var.as_tensor())?;
    }
    buf.extend_from_slice(&state.opt.step.to_le_bytes());
    buf.extend_from_slice(&(state.opt.state.len() as u32).to_le_bytes());
    for (name, m) in &state.opt.state {
        put_name(&mut buf, name)?;
        put_tensor(&mut buf, &m.m)?;
        put_tensor(&mut buf, &m.v)?;
    }
    let config = serde_json::to_vec_pretty(&state.config)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Write through a temporary file so an interrupted save never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse and validate the whole file before building any state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 6 + DIGEST_LEN {
        return Err(Error::Corrupt("checkpoint is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checkpoint digest mismatch (truncated or modified)".into()));
    }
    let mut r = ByteReader::new(&body[6..]);
    let step = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name = get_name(&mut r)?;
        params.insert(name, get_tensor(&mut r)?);
    }
    let adam_step = r.u64()?;
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let name = get_name(&mut r)?;
        let m = get_tensor(&mut r)?;
        let v = get_tensor(&mut r)?;
        moments.push((name, m, v));
    }
    let len = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.bytes(len)?)?;
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes after config snapshot".into()));
    }

    let state = TrainState::new(&config)?;
    let vars = state.model.store.vars();
    if vars.len() != params.len() || vars.iter().any(|(n, _)| !params.contains_key(n)) {
        return Err(Error::Corrupt("checkpoint parameters do not match the model built from its config".into()));
    }
    for (name, var) in &vars {
        if params[name].dims() != var.dims() {
            return Err(Error::Corrupt(format!("parameter {name} has shape {:?}, model expects {:?}", params[name].dims(), var.dims())));
        }
    }
    let mut state = state;
    for (name, var) in &vars {
        var.set(&params[name])?;
    }
    for (name, m, v) in moments {
        let var = state.model.store.var(&name).ok_or_else(|| Error::Corrupt(format!("optimizer state for unknown parameter {name}")))?;
        state.opt.restore(&name, &var, m, v)?;
    }
    state.opt.step = adam_step;
    state.step = step;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
