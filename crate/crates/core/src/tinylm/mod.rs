//! Byte-level tokenizer and a small decoder-only transformer with exact
//! backpropagation, SGD, sampling and text embedding.

mod batch;
mod config;
pub mod io;
mod model;
mod ops;
mod tensor;
mod tokenizer;

use thiserror::Error;

pub use batch::TrainBatch;
pub use config::{AdapterConfig, LoraSpec, ModelConfig};
pub use io::{load_model, save_model};
pub(crate) use model::gaussian;
pub use model::{
    embed_text, forward, generate, grad, hidden_states, init_params, layer_param, lora_a_name, lora_b_name, loss,
    loss_value, prefix_k_name, prefix_v_name, sgd_step, value_and_grad, DecodeMode, INIT_STD,
};
pub use tensor::{Param, ParamSet, Tensor};
pub use tokenizer::{detokenize, tail_within, tokenize, TokenId, Tokenizer};

use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: TokenId, vocab: usize },
    #[error("no unmasked position in batch")]
    EmptyMask,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("misaligned parameter sets: {0}")]
    MisalignedParams(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
