//! HTTP service and command line around the fedchat core: corpus ingestion,
//! federated training runs, evaluation, index building and question answering.

pub mod api;
pub mod commands;
mod config;
mod state;

use std::path::PathBuf;

use fedchat_core::fedsim::FedError;
use fedchat_core::ingest::IngestError;
use fedchat_core::metrics::EvalError;
use fedchat_core::retrieval::RetrievalError;
use fedchat_core::tinylm::ModelError;
use thiserror::Error;

pub use api::{router, AskRequest, IngestDocument, IngestRequest, MAX_QUESTION_BYTES};
pub use config::{ContextFilter, ServiceConfig, CONFIG_ENV, DEFAULT_CONFIG_FILE};
pub use state::{load_or_build_index, AppState, AskResponse, AskStatus, IngestSummary, Snapshot};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("model file {0} not found; run `fedchat train` first")]
    ModelMissing(PathBuf),
    #[error("index is not loaded yet")]
    NotReady,
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
