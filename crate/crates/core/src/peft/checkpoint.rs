//! Checkpoint snapshots and sparse checkpoint diffs.
//!
//! Checkpoint wire form: magic `TCK1`, u32 round, then the model-file entry
//! records. Diff wire form: magic `TLD1`, u64 base hash, f32 tau, u32 record
//! count, then per changed tensor: u32-prefixed name and a u32 count. A count
//! with the high bit clear is followed by that many (u32 flat index, f32 value)
//! pairs. With the high bit set, the low bits give the element count `n`, then
//! a u32 changed-entry count and `n` dense f32 values. Dense records are used
//! when they are smaller, which bounds a diff by the full checkpoint size.

use std::collections::BTreeMap;

use crate::digest::Fnv1a;
use crate::tinylm::io::{read_entries, write_entries};
use crate::tinylm::ParamSet;
use crate::wire::{Reader, WireError, Writer};

use super::PeftError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCK1";
pub const DIFF_MAGIC: &[u8; 4] = b"TLD1";
const DENSE_FLAG: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    params: ParamSet,
    content_hash: u64,
}

impl Checkpoint {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(CHECKPOINT_MAGIC);
        w.u32(self.round);
        write_entries(&mut w, &self.params);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, PeftError> {
        let mut r = Reader::new(buf);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let round = r.u32()?;
        let params = read_entries(&mut r)?;
        Ok(checkpoint_save(&params, round))
    }
}

/// FNV-1a over the canonical entry records (names, flags, shapes, values).
pub fn content_hash(params: &ParamSet) -> u64 {
    let mut w = Writer::new();
    write_entries(&mut w, params);
    let mut h = Fnv1a::new();
    h.update(&w.finish());
    h.finish()
}

pub fn checkpoint_save(params: &ParamSet, round: u32) -> Checkpoint {
    Checkpoint {
        round,
        params: params.clone(),
        content_hash: content_hash(params),
    }
}

/// Changed values of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorDelta {
    /// (flat index, new value), ascending by index.
    Sparse(Vec<(u32, f32)>),
    /// Every new value; `changed` entries actually moved.
    Dense { changed: u32, values: Vec<f32> },
}

impl TensorDelta {
    pub fn changed(&self) -> usize {
        match self {
            TensorDelta::Sparse(e) => e.len(),
            TensorDelta::Dense { changed, .. } => *changed as usize,
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            TensorDelta::Sparse(e) => 8 * e.len(),
            TensorDelta::Dense { values, .. } => 4 + 4 * values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDiff {
    pub base_hash: u64,
    pub tau: f32,
    pub changed: BTreeMap<String, TensorDelta>,
}

impl CheckpointDiff {
    /// Number of changed scalar entries across all tensors.
    pub fn entry_count(&self) -> usize {
        self.changed.values().map(TensorDelta::changed).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.changed.keys().map(String::as_str)
    }

    pub fn encoded_len(&self) -> usize {
        20 + self
            .changed
            .iter()
            .map(|(n, d)| 8 + n.len() + d.payload_len())
            .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(DIFF_MAGIC);
        w.u64(self.base_hash);
        w.f32(self.tau);
        w.u32(self.changed.len() as u32);
        for (name, delta) in &self.changed {
            w.prefixed(name.as_bytes());
            match delta {
                TensorDelta::Sparse(entries) => {
                    w.u32(entries.len() as u32);
                    for &(i, v) in entries {
                        w.u32(i);
                        w.f32(v);
                    }
                }
                TensorDelta::Dense { changed, values } => {
                    w.u32(DENSE_FLAG | values.len() as u32);
                    w.u32(*changed);
                    for &v in values {
                        w.f32(v);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, PeftError> {
        let mut r = Reader::new(buf);
        r.expect_magic(DIFF_MAGIC)?;
        let base_hash = r.u64()?;
        let tau = r.f32()?;
        let count = r.u32()?;
        let mut changed = BTreeMap::new();
        for _ in 0..count {
            let name = r.prefixed_str()?.to_string();
            let n = r.u32()?;
            let delta = if n & DENSE_FLAG != 0 {
                let len = (n & !DENSE_FLAG) as usize;
                let changed = r.u32()?;
                let values = (0..len).map(|_| r.f32()).collect::<Result<_, _>>()?;
                TensorDelta::Dense { changed, values }
            } else {
                let entries = (0..n)
                    .map(|_| Ok((r.u32()?, r.f32()?)))
                    .collect::<Result<Vec<_>, WireError>>()?;
                TensorDelta::Sparse(entries)
            };
            if changed.insert(name.clone(), delta).is_some() {
                return Err(WireError::Invalid(format!("duplicate record `{name}`")).into());
            }
        }
        r.finish()?;
        Ok(Self {
            base_hash,
            tau,
            changed,
        })
    }
}

fn moved(old: f32, new: f32, tau: f32) -> bool {
    if tau == 0.0 {
        // exact diffs track every bit change, including signed zeros
        old.to_bits() != new.to_bits()
    } else {
        (new as f64 - old as f64).abs() > tau as f64
    }
}

/// Entries of `new` that moved by more than `tau` relative to `old`.
pub fn checkpoint_diff(old: &Checkpoint, new: &Checkpoint, tau: f32) -> Result<CheckpointDiff, PeftError> {
    params_diff(&old.params, old.content_hash, &new.params, tau)
}

pub(crate) fn params_diff(
    old: &ParamSet,
    old_hash: u64,
    new: &ParamSet,
    tau: f32,
) -> Result<CheckpointDiff, PeftError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(PeftError::InvalidTau(tau));
    }
    old.ensure_aligned(new)?;
    let mut changed = BTreeMap::new();
    for ((name, a), (_, b)) in old.iter().zip(new.iter()) {
        let entries: Vec<(u32, f32)> = a
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .enumerate()
            .filter(|(_, (x, y))| moved(**x, **y, tau))
            .map(|(i, (_, y))| (i as u32, *y))
            .collect();
        if entries.is_empty() {
            continue;
        }
        let numel = b.tensor.numel();
        let delta = if 8 * entries.len() > 4 + 4 * numel {
            TensorDelta::Dense {
                changed: entries.len() as u32,
                values: b.tensor.data().to_vec(),
            }
        } else {
            TensorDelta::Sparse(entries)
        };
        changed.insert(name.to_string(), delta);
    }
    Ok(CheckpointDiff {
        base_hash: old_hash,
        tau,
        changed,
    })
}

/// Applies `diff` to the checkpoint it was computed against.
pub fn checkpoint_apply(base: &Checkpoint, diff: &CheckpointDiff) -> Result<ParamSet, PeftError> {
    if diff.base_hash != base.content_hash {
        return Err(PeftError::BaseHashMismatch {
            expected: diff.base_hash,
            found: base.content_hash,
        });
    }
    let mut out = base.params.clone();
    for (name, delta) in &diff.changed {
        let t = out
            .tensor_mut(name)
            .map_err(|_| PeftError::UnknownTarget(name.clone()))?;
        let numel = t.numel();
        match delta {
            TensorDelta::Sparse(entries) => {
                for &(i, v) in entries {
                    let slot = t
                        .data_mut()
                        .get_mut(i as usize)
                        .ok_or_else(|| PeftError::IndexOutOfRange {
                            name: name.clone(),
                            index: i as usize,
                            len: numel,
                        })?;
                    *slot = v;
                }
            }
            TensorDelta::Dense { values, .. } => {
                if values.len() != numel {
                    return Err(PeftError::IndexOutOfRange {
                        name: name.clone(),
                        index: values.len(),
                        len: numel,
                    });
                }
                t.data_mut().copy_from_slice(values);
            }
        }
    }
    Ok(out)
}
