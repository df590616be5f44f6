//! Document ingestion: raw documents are split into provenance-tracked blocks,
//! enriched with TF-IDF keywords, paired with generated questions, and stored
//! as JSON lines.

mod blocks;
mod document;
mod keywords;
mod roles;
mod store;

use thiserror::Error;

pub use blocks::{block_id, detect_header, parse_blocks, Block, BlockMetadata};
pub use document::{load_documents, strip_tags, RawDocument};
pub use keywords::{enrich_metadata, extract_keywords, terms, CorpusStats, KEYWORD_COUNT, STOPWORDS};
pub use roles::{best_sentence, fine_tune_role, generate_qa, role_batch, role_loss, QAPair, RolePromptSet};
pub use store::{load_corpus, persist_corpus, Corpus, CORPUS_FILE, DOCUMENTS_FILE, INDEX_FILE, QA_FILE};

use crate::tinylm::ModelError;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("`{0}` is not valid UTF-8")]
    InvalidEncoding(String),
    #[error("block {0} has no text to question")]
    EmptyBlock(String),
    #[error("role prompt set has no pairs")]
    EmptyPromptSet,
    #[error("{file}: expected header {expected}, found {found}")]
    FormatVersionMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("duplicate block id {0}")]
    DuplicateBlockId(String),
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("corrupt corpus store: {0}")]
    Corrupt(String),
    #[error("unsupported source `{0}`")]
    UnsupportedSource(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
