use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use super::{score_pair, PairScores};
use crate::tinylm::{generate, DecodeMode, ModelConfig, ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation pairs")]
    EmptyPairs,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that continues a prompt with up to `max_new` tokens.
pub trait TextGenerator {
    fn continue_text(&self, prompt: &str, max_new: usize) -> Result<String, ModelError>;
}

/// Greedy decoding with the tiny model.
pub struct GreedyGenerator<'a> {
    pub params: &'a ParamSet,
    pub cfg: &'a ModelConfig,
}

impl TextGenerator for GreedyGenerator<'_> {
    fn continue_text(&self, prompt: &str, max_new: usize) -> Result<String, ModelError> {
        generate(self.params, self.cfg, prompt, max_new, DecodeMode::Greedy)
    }
}

/// Mean scores over a set of (prompt, reference) pairs, as ratios in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pairs: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
    #[serde(skip)]
    pub per_pair: Vec<PairScores>,
}

impl MetricsReport {
    fn from_scores(per_pair: Vec<PairScores>) -> Self {
        let n = per_pair.len() as f64;
        let mean = |f: fn(&PairScores) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
        Self {
            pairs: per_pair.len(),
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            bleu4: mean(|s| s.bleu4),
            per_pair,
        }
    }

    /// `(label, value)` rows in table order.
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("Rouge-1", self.rouge1),
            ("Rouge-2", self.rouge2),
            ("Rouge-L", self.rouge_l),
            ("BLEU-4", self.bleu4),
        ]
    }
}

/// Continues each prompt for as many tokens as its reference has bytes and
/// scores the continuation against the reference.
pub fn evaluate_with<G: TextGenerator + ?Sized>(
    gen: &G,
    pairs: &[(String, String)],
) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let scores = pairs
        .iter()
        .map(|(prompt, reference)| {
            let out = gen.continue_text(prompt, reference.len().max(1))?;
            Ok(score_pair(&out, reference))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(MetricsReport::from_scores(scores))
}

pub fn evaluate_model(
    params: &ParamSet,
    cfg: &ModelConfig,
    pairs: &[(String, String)],
) -> Result<MetricsReport, EvalError> {
    evaluate_with(&GreedyGenerator { params, cfg }, pairs)
}

/// Metrics as rows, one column per model; cells show `score·100 (raw)`.
pub fn format_table(columns: &[(String, MetricsReport)]) -> String {
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(18);
    let mut out = format!("{:<8}", "Metric");
    for (name, _) in columns {
        let _ = write!(out, " | {name:>width$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(8 + columns.len() * (width + 3)));
    out.push('\n');
    for row in 0..4 {
        let label = columns.first().map_or("", |(_, r)| r.rows()[row].0);
        let _ = write!(out, "{label:<8}");
        for (_, report) in columns {
            let v = report.rows()[row].1;
            let cell = format!("{:.3} ({:.5})", 100.0 * v, v);
            let _ = write!(out, " | {cell:>width$}");
        }
        out.push('\n');
    }
    out
}
