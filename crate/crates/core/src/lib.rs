//! Federated context chatbot core: a tiny byte-level language model trained with
//! federated averaging and parameter-efficient adapters, generation metrics,
//! document ingestion into provenance-tracked blocks, and retrieval with
//! exemplar-SVM reranking.

pub mod digest;
pub mod fedsim;
pub mod ingest;
pub mod metrics;
pub mod peft;
pub mod retrieval;
pub mod tinylm;
pub mod wire;
