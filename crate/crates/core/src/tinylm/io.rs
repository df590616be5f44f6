//! Model file: magic `TLM1`, u32-prefixed JSON config, then one record per entry:
//! u32-prefixed name, u8 trainable flag, u32 rank, u32 dims, raw f32 values.
//! All integers and floats are little-endian.

use std::path::Path;

use super::{ModelConfig, ModelError, ParamSet, Tensor};
use crate::wire::{Reader, WireError, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"TLM1";

/// Appends one record per entry, in name order.
pub fn write_entries(w: &mut Writer, params: &ParamSet) {
    for (name, p) in params.iter() {
        write_entry(w, name, &p.tensor, p.trainable);
    }
}

pub fn write_entry(w: &mut Writer, name: &str, t: &Tensor, trainable: bool) {
    w.prefixed(name.as_bytes());
    w.u8(trainable as u8);
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    for &v in t.data() {
        w.f32(v);
    }
}

/// Size in bytes of one entry record.
pub fn entry_record_len(name: &str, t: &Tensor) -> usize {
    4 + name.len() + 1 + 4 + 4 * t.rank() + 4 * t.numel()
}

pub fn read_entry(r: &mut Reader<'_>) -> Result<(String, Tensor, bool), WireError> {
    let name = r.prefixed_str()?.to_string();
    let trainable = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(WireError::Invalid(format!("trainable flag {other} for `{name}`"))),
    };
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| WireError::Invalid(format!("shape overflow for `{name}`")))?;
    let raw = r.take(
        numel
            .checked_mul(4)
            .ok_or_else(|| WireError::Invalid("size overflow".into()))?,
    )?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| WireError::Invalid(e.to_string()))?;
    Ok((name, t, trainable))
}

/// Reads records until the buffer is exhausted.
pub fn read_entries(r: &mut Reader<'_>) -> Result<ParamSet, WireError> {
    let mut params = ParamSet::new();
    while !r.is_done() {
        let (name, t, trainable) = read_entry(r)?;
        if params.contains(&name) {
            return Err(WireError::Invalid(format!("duplicate entry `{name}`")));
        }
        params.insert(name, t, trainable);
    }
    Ok(params)
}

pub fn encode_model(params: &ParamSet, cfg: &ModelConfig) -> Vec<u8> {
    let mut w = Writer::with_magic(MODEL_MAGIC);
    let json = serde_json::to_vec(cfg).expect("config serializes");
    w.prefixed(&json);
    write_entries(&mut w, params);
    w.finish()
}

pub fn decode_model(buf: &[u8]) -> Result<(ModelConfig, ParamSet), ModelError> {
    let mut r = Reader::new(buf);
    r.expect_magic(MODEL_MAGIC)?;
    let json = r.prefixed()?;
    let cfg: ModelConfig = serde_json::from_slice(json).map_err(|e| ModelError::Format(format!("config json: {e}")))?;
    cfg.validate()?;
    let params = read_entries(&mut r)?;
    r.finish()?;
    Ok((cfg, params))
}

pub fn save_model(path: impl AsRef<Path>, params: &ParamSet, cfg: &ModelConfig) -> Result<(), ModelError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_model(params, cfg))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamSet), ModelError> {
    let buf = std::fs::read(path)?;
    decode_model(&buf)
}
