use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use fedchat_core::ingest::{load_corpus, persist_corpus, Corpus, RawDocument};
use fedchat_core::retrieval::{
    answer_question, build_index, embedder_fingerprint, embedding_dim, update_index, AnswerOutcome, AskOptions,
    EmbeddingIndex, Metric, SourceRef,
};
use fedchat_core::tinylm::{load_model, ModelConfig, ParamSet};
use serde::Serialize;
use tracing::info;

use crate::{ServiceConfig, ServiceError};

/// An immutable corpus and the index built from it. Requests clone the `Arc`
/// once and never see a later swap.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    pub corpus: Corpus,
    pub index: EmbeddingIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AskStatus {
    Ok,
    NoContext,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AskResponse {
    pub status: AskStatus,
    pub answer: String,
    pub expanded_question: String,
    pub sources: Vec<SourceRef>,
    pub latency_ms: f64,
    pub index_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub blocks_added: usize,
    pub index_version: u64,
}

/// Index from `path` when it matches the corpus and model, else a fresh build.
/// Returns the index and whether it was rebuilt.
pub fn load_or_build_index(
    path: &Path,
    corpus: &Corpus,
    params: &ParamSet,
    cfg: &ModelConfig,
    metric: Metric,
) -> Result<(EmbeddingIndex, bool), ServiceError> {
    if corpus.blocks.is_empty() {
        return Ok((empty_index(params, cfg, metric), false));
    }
    if let Ok(index) = EmbeddingIndex::load(path) {
        let ids_match = index.block_ids.len() == corpus.blocks.len()
            && index
                .block_ids
                .iter()
                .zip(&corpus.blocks)
                .all(|(a, b)| *a == b.block_id);
        if ids_match && index.metric == metric && index.fingerprint == embedder_fingerprint(params, cfg) {
            return Ok((index, false));
        }
    }
    let index = build_index(corpus, params, cfg, metric)?;
    save_index(&index, path)?;
    Ok((index, true))
}

fn empty_index(params: &ParamSet, cfg: &ModelConfig, metric: Metric) -> EmbeddingIndex {
    EmbeddingIndex::new(
        Vec::new(),
        embedding_dim(cfg),
        Vec::new(),
        metric,
        embedder_fingerprint(params, cfg),
    )
    .expect("empty index is well formed")
}

fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), ServiceError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
    }
    index.save(path).map_err(|e| ServiceError::Storage(e.to_string()))
}

pub struct AppState {
    pub config: ServiceConfig,
    model: ModelConfig,
    params: ParamSet,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    writer: Mutex<()>,
}

impl AppState {
    /// State with a loaded model and no index yet; not ready until
    /// [`AppState::load_store`] or [`AppState::install`] runs.
    pub fn new(config: ServiceConfig, model: ModelConfig, params: ParamSet) -> Self {
        Self {
            config,
            model,
            params,
            snapshot: RwLock::new(None),
            writer: Mutex::new(()),
        }
    }

    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        if !config.model_path.is_file() {
            return Err(ServiceError::ModelMissing(config.model_path.clone()));
        }
        let (model, params) = load_model(&config.model_path)?;
        Ok(Self::new(config, model, params))
    }

    pub fn model(&self) -> (&ModelConfig, &ParamSet) {
        (&self.model, &self.params)
    }

    /// Loads the corpus store and its index, rebuilding the index if stale.
    pub fn load_store(&self) -> Result<u64, ServiceError> {
        let corpus = load_corpus(&self.config.corpus_dir)?;
        let (index, rebuilt) = load_or_build_index(
            &self.config.index_path,
            &corpus,
            &self.params,
            &self.model,
            self.config.metric,
        )?;
        info!(blocks = corpus.blocks.len(), rebuilt, "index ready");
        Ok(self.install(corpus, index))
    }

    /// Publishes a new snapshot and returns its version.
    pub fn install(&self, corpus: Corpus, index: EmbeddingIndex) -> u64 {
        let mut slot = self.snapshot.write().unwrap_or_else(|e| e.into_inner());
        let version = slot.as_ref().map_or(1, |s| s.version + 1);
        *slot = Some(Arc::new(Snapshot { version, corpus, index }));
        version
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn ask_options(&self, k: Option<usize>) -> AskOptions {
        AskOptions {
            k: k.unwrap_or(self.config.k_sources),
            floor: self.config.similarity_floor,
            ..AskOptions::default()
        }
    }

    pub fn ask(
        &self,
        snap: &Snapshot,
        question: &str,
        context: Option<&BTreeSet<String>>,
        k: Option<usize>,
    ) -> Result<AskResponse, ServiceError> {
        let start = Instant::now();
        let outcome = answer_question(
            &self.params,
            &self.model,
            question,
            &snap.index,
            &snap.corpus,
            &self.ask_options(k),
            context,
        )?;
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
        Ok(match outcome {
            AnswerOutcome::Answered(a) => AskResponse {
                status: AskStatus::Ok,
                answer: a.text,
                expanded_question: a.expanded_question,
                sources: a.sources,
                latency_ms,
                index_version: snap.version,
            },
            AnswerOutcome::NoContext { expanded_question, .. } => AskResponse {
                status: AskStatus::NoContext,
                answer: String::new(),
                expanded_question,
                sources: Vec::new(),
                latency_ms,
                index_version: snap.version,
            },
        })
    }

    /// Adds documents, persists the store, updates the index and swaps it in.
    /// Writers are serialized; documents already present add nothing and
    /// leave the version unchanged.
    pub fn ingest(&self, docs: Vec<RawDocument>) -> Result<IngestSummary, ServiceError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot().ok_or(ServiceError::NotReady)?;
        let mut corpus = current.corpus.clone();
        let blocks_added = corpus.add_documents(docs)?;
        if blocks_added == 0 {
            return Ok(IngestSummary {
                blocks_added,
                index_version: current.version,
            });
        }
        persist_corpus(&corpus, &self.config.corpus_dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
        let index = if current.index.is_empty() {
            build_index(&corpus, &self.params, &self.model, self.config.metric)?
        } else {
            update_index(&current.index, &corpus, &self.params, &self.model, self.config.metric)?
        };
        save_index(&index, &self.config.index_path)?;
        let index_version = self.install(corpus, index);
        info!(blocks_added, index_version, "ingested");
        Ok(IngestSummary {
            blocks_added,
            index_version,
        })
    }
}
