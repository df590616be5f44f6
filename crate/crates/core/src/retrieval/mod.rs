//! Block retrieval: an exact nearest-neighbor index over block embeddings,
//! exemplar-SVM reranking, header-based query expansion and grounded answers.

mod answer;
mod embed;
mod index;
mod svm;

use thiserror::Error;

pub use answer::{answer_question, expand_query, keyword_allows, Answer, AnswerOutcome, AskOptions, SourceRef};
pub use embed::{embed_text, embedder_fingerprint, embedding_dim, lexical_features, LEXICAL_DIM, LEXICAL_SHARE};
pub use index::{
    build_index, nn_search, nn_search_within, update_index, EmbeddingIndex, Metric, SearchResult, INDEX_MAGIC,
};
pub use svm::{svm_rerank, train_exemplar_svm, SvmModel, SvmParams};

use crate::tinylm::ModelError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus has no blocks")]
    EmptyCorpus,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no candidates to rerank")]
    EmptyCandidates,
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("index contains non-finite values")]
    NonFinite,
    #[error("index was built by embedder {index:016x}, model is {model:016x}")]
    FingerprintMismatch { index: u64, model: u64 },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
