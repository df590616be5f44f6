use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::Corpus;
use crate::tinylm::{ModelConfig, ParamSet};
use crate::wire::{Reader, Writer};

use super::embed::{embed_text, embedder_fingerprint, embedding_dim};
use super::RetrievalError;

pub const INDEX_MAGIC: &[u8; 4] = b"TVI1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        }
    }
}

/// Block embeddings, row `i` belonging to `block_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub block_ids: Vec<String>,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub metric: Metric,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub block_id: String,
    /// Similarity for cosine, distance for euclidean.
    pub score: f64,
    pub rank: usize,
}

impl EmbeddingIndex {
    pub fn new(
        block_ids: Vec<String>,
        dim: usize,
        vectors: Vec<f32>,
        metric: Metric,
        fingerprint: u64,
    ) -> Result<Self, RetrievalError> {
        if vectors.len() != block_ids.len() * dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: block_ids.len() * dim,
                found: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self {
            block_ids,
            dim,
            vectors,
            metric,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.block_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, block_id: &str) -> Option<usize> {
        self.block_ids.iter().position(|b| b == block_id)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(INDEX_MAGIC);
        w.u32(self.len() as u32);
        w.u32(self.dim as u32);
        w.u8(self.metric.code());
        w.u64(self.fingerprint);
        for id in &self.block_ids {
            w.prefixed(id.as_bytes());
        }
        for &v in &self.vectors {
            w.f32(v);
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = Reader::new(buf);
        r.expect_magic(INDEX_MAGIC)?;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let metric = match r.u8()? {
            0 => Metric::Cosine,
            1 => Metric::Euclidean,
            m => return Err(RetrievalError::Format(format!("unknown metric byte {m}"))),
        };
        let fingerprint = r.u64()?;
        let mut block_ids = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            block_ids.push(r.prefixed_str()?.to_string());
        }
        let count = n
            .checked_mul(dim)
            .filter(|c| c.checked_mul(4) == Some(r.remaining()))
            .ok_or_else(|| RetrievalError::Format("vector data length does not match n x d".into()))?;
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            vectors.push(r.f32()?);
        }
        r.finish()?;
        Self::new(block_ids, dim, vectors, metric, fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Embeds every block of the corpus in corpus order.
pub fn build_index(
    corpus: &Corpus,
    params: &ParamSet,
    cfg: &ModelConfig,
    metric: Metric,
) -> Result<EmbeddingIndex, RetrievalError> {
    if corpus.blocks.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let dim = embedding_dim(cfg);
    let mut vectors = Vec::with_capacity(corpus.blocks.len() * dim);
    for b in &corpus.blocks {
        vectors.extend(embed_text(params, cfg, &b.text)?);
    }
    let ids = corpus.blocks.iter().map(|b| b.block_id.clone()).collect();
    EmbeddingIndex::new(ids, dim, vectors, metric, embedder_fingerprint(params, cfg))
}

/// [`build_index`] that copies rows of `previous` for blocks it already
/// holds, embedding only new blocks. Falls back to a full build when
/// `previous` came from another embedder or metric. Equal to a full build.
pub fn update_index(
    previous: &EmbeddingIndex,
    corpus: &Corpus,
    params: &ParamSet,
    cfg: &ModelConfig,
    metric: Metric,
) -> Result<EmbeddingIndex, RetrievalError> {
    let fingerprint = embedder_fingerprint(params, cfg);
    if previous.fingerprint != fingerprint || previous.metric != metric || previous.dim != embedding_dim(cfg) {
        return build_index(corpus, params, cfg, metric);
    }
    if corpus.blocks.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let known: HashMap<&str, usize> = previous
        .block_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut vectors = Vec::with_capacity(corpus.blocks.len() * previous.dim);
    for b in &corpus.blocks {
        match known.get(b.block_id.as_str()) {
            Some(&i) => vectors.extend_from_slice(previous.row(i)),
            None => vectors.extend(embed_text(params, cfg, &b.text)?),
        }
    }
    let ids = corpus.blocks.iter().map(|b| b.block_id.clone()).collect();
    EmbeddingIndex::new(ids, previous.dim, vectors, metric, fingerprint)
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exact top-`k` by full scan, best first, ties in block id order.
pub fn nn_search(index: &EmbeddingIndex, q: &[f32], k: usize) -> Result<Vec<SearchResult>, RetrievalError> {
    nn_search_within(index, q, k, |_| true)
}

/// [`nn_search`] restricted to rows for which `allow` holds.
pub fn nn_search_within(
    index: &EmbeddingIndex,
    q: &[f32],
    k: usize,
    allow: impl Fn(usize) -> bool,
) -> Result<Vec<SearchResult>, RetrievalError> {
    if q.len() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim,
            found: q.len(),
        });
    }
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .filter(|&i| allow(i))
        .map(|i| {
            let row = index.row(i);
            let s = match index.metric {
                Metric::Cosine => cosine(q, row),
                Metric::Euclidean => euclidean(q, row),
            };
            (s, i)
        })
        .collect();
    let better = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        let by_score = match index.metric {
            Metric::Cosine => b.0.total_cmp(&a.0),
            Metric::Euclidean => a.0.total_cmp(&b.0),
        };
        by_score.then_with(|| index.block_ids[a.1].cmp(&index.block_ids[b.1]))
    };
    scored.sort_by(better);
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(rank, (score, i))| SearchResult {
            block_id: index.block_ids[i].clone(),
            score,
            rank,
        })
        .collect())
}
