//! Command implementations shared by the `fedchat` binary and tests.

use std::path::Path;

use fedchat_core::fedsim::{build_eval_set, run_training_with, HistoryRow, RunConfig, RunOutput};
use fedchat_core::ingest::{load_corpus, load_documents, persist_corpus};
use fedchat_core::metrics::{evaluate_model, MetricsReport};
use fedchat_core::retrieval::build_index;
use fedchat_core::tinylm::{init_params, load_model, loss_value, save_model};
use serde::Serialize;

use crate::{AppState, AskResponse, ServiceConfig, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub documents_added: usize,
    pub blocks_added: usize,
    pub total_blocks: usize,
}

/// Adds every document under `dir` to the corpus store.
pub fn ingest_dir(config: &ServiceConfig, dir: &Path) -> Result<CorpusSummary, ServiceError> {
    let mut corpus = load_corpus(&config.corpus_dir)?;
    let docs = load_documents(dir)?;
    let before = corpus.documents.len();
    let blocks_added = corpus.add_documents(docs)?;
    persist_corpus(&corpus, &config.corpus_dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(CorpusSummary {
        documents_added: corpus.documents.len() - before,
        blocks_added,
        total_blocks: corpus.blocks.len(),
    })
}

/// Texts of the documents under `data`, or of the corpus store when `None`.
pub fn training_texts(config: &ServiceConfig, data: Option<&Path>) -> Result<Vec<String>, ServiceError> {
    let docs = match data {
        Some(dir) => load_documents(dir)?,
        None => load_corpus(&config.corpus_dir)?.documents,
    };
    if docs.is_empty() {
        return Err(ServiceError::Invalid(
            "no training documents; pass --data or ingest a corpus first".into(),
        ));
    }
    Ok(docs.into_iter().map(|d| d.text).collect())
}

/// Runs federated training from a fresh base model, then writes the global
/// model to `model_out` and the history CSV to `history_out`.
pub fn train(
    run: &RunConfig,
    texts: &[String],
    model_out: &Path,
    history_out: &Path,
    on_row: impl FnMut(&HistoryRow),
) -> Result<RunOutput, ServiceError> {
    run.validate()?;
    let base = init_params(&run.model)?;
    let out = run_training_with(run, texts, &base, on_row)?;
    for p in [model_out, history_out] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
        }
    }
    save_model(model_out, &out.params, &out.model)?;
    out.history.save(history_out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub metrics: MetricsReport,
}

/// Loss on held-out windows and ROUGE/BLEU on prompt/continuation pairs cut
/// from `texts`.
pub fn evaluate(model_path: &Path, texts: &[String], pairs: usize) -> Result<EvalSummary, ServiceError> {
    let (cfg, params) = load_model(model_path)?;
    let defaults = RunConfig::default();
    let seq_len = defaults.seq_len.min(cfg.context_len);
    let pair_bytes = defaults.eval_pair_bytes.min(cfg.context_len / 2);
    let eval = build_eval_set(texts, seq_len, defaults.eval_windows, pairs.max(1), pair_bytes)?;
    Ok(EvalSummary {
        loss: loss_value(&params, &cfg, &eval.batch)?,
        metrics: evaluate_model(&params, &cfg, &eval.pairs)?,
    })
}

/// Builds the index for the stored corpus and writes it to `index_path`.
pub fn build_store_index(config: &ServiceConfig) -> Result<usize, ServiceError> {
    if !config.model_path.is_file() {
        return Err(ServiceError::ModelMissing(config.model_path.clone()));
    }
    let (cfg, params) = load_model(&config.model_path)?;
    let corpus = load_corpus(&config.corpus_dir)?;
    let index = build_index(&corpus, &params, &cfg, config.metric)?;
    if let Some(dir) = config.index_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::Storage(e.to_string()))?;
    }
    index
        .save(&config.index_path)
        .map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(index.len())
}

/// One question against the stored corpus, outside the server.
pub fn ask_once(
    config: &ServiceConfig,
    question: &str,
    context: Option<&str>,
    k: Option<usize>,
) -> Result<AskResponse, ServiceError> {
    if question.trim().is_empty() {
        return Err(ServiceError::Invalid("question is empty".into()));
    }
    let words = match context {
        None => None,
        Some(name) => Some(
            config
                .contexts()
                .remove(name)
                .ok_or_else(|| ServiceError::UnknownContext(name.to_string()))?,
        ),
    };
    let state = AppState::from_config(config.clone())?;
    state.load_store()?;
    let snap = state.snapshot().ok_or(ServiceError::NotReady)?;
    state.ask(&snap, question, words.as_ref(), k)
}
