//! Federated averaging simulator: in-process clients with private shards,
//! uniform parameter averaging, quantized and diff-based transport with a byte
//! ledger, and multi-round runs producing metric histories.

mod aggregate;
mod client;
mod config;
mod history;
mod quant;
mod round;
mod run;

use thiserror::Error;

pub use aggregate::fedavg;
pub use client::{client_update, document_stream, ClientState};
pub use config::{AdapterMode, QuantBits, RoundConfig, RunConfig, TransportMode};
pub use history::{HistoryRow, RunHistory, GLOBAL_ID, HISTORY_HEADER};
pub use quant::{dequantize, quantize, quantize_tensor, QuantizedParams, QuantizedTensor, QUANT_MAGIC};
pub use round::{decode_payload, encode_downlink, encode_payload, run_round, RoundOutcome, TransportRecord};
pub use run::{build_eval_set, partition, prepare_model, run_training, run_training_with, EvalSet, RunOutput};

use crate::metrics::EvalError;
use crate::peft::PeftError;
use crate::tinylm::ModelError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("client {0} has no training data")]
    EmptyDataset(usize),
    #[error("no client parameter sets to aggregate")]
    EmptyList,
    #[error("client id {0} appears more than once")]
    DuplicateClient(usize),
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),
    #[error("unsupported quantization width {0} (only 8 bits)")]
    UnsupportedBits(u8),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("{docs} documents cannot fill an evaluation split and {needed} shards")]
    NotEnoughDocuments { docs: usize, needed: usize },
    #[error("payload does not fit the global model: {0}")]
    PayloadMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
