//! Parameter-efficient adapters (LoRA and per-layer key/value prefixes),
//! trainable-parameter accounting, and checkpoint diffs for transport.

mod adapters;
mod checkpoint;
mod stats;

use thiserror::Error;

pub use adapters::{attach_lora, attach_prefix, default_alpha, default_lora_targets};
pub(crate) use checkpoint::params_diff;
pub use checkpoint::{
    checkpoint_apply, checkpoint_diff, checkpoint_save, content_hash, Checkpoint, CheckpointDiff, TensorDelta,
    CHECKPOINT_MAGIC, DIFF_MAGIC,
};
pub use stats::{param_stats, ParamStats, REFERENCE_TRAINABLE_PERCENT};

use crate::tinylm::ModelError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("target `{0}` is not a 2-D matrix")]
    NonMatrixTarget(String),
    #[error("`{0}` already carries an adapter")]
    AlreadyAdapted(String),
    #[error("adapter rank must be at least 1")]
    InvalidRank,
    #[error("prefix length must be at least 1")]
    InvalidPrefixLen,
    #[error("diff threshold must be a non-negative number, got {0}")]
    InvalidTau(f32),
    #[error("diff base hash {expected:016x} does not match checkpoint {found:016x}")]
    BaseHashMismatch { expected: u64, found: u64 },
    #[error("index {index} out of range for `{name}` with {len} elements")]
    IndexOutOfRange { name: String, index: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Wire(#[from] WireError),
}
