//! ROUGE-N, ROUGE-L and BLEU over lowercased whitespace tokens, plus model
//! evaluation reports.

mod eval;

use std::collections::HashMap;

use serde::Serialize;

pub use eval::{evaluate_model, evaluate_with, format_table, EvalError, GreedyGenerator, MetricsReport, TextGenerator};

/// Lowercases and splits on Unicode whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(hits: usize, cand: usize, refs: usize) -> Self {
        if hits == 0 || cand == 0 || refs == 0 {
            return Self::default();
        }
        let precision = hits as f64 / cand as f64;
        let recall = hits as f64 / refs as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and the total candidate n-gram count.
fn clipped_overlap<T: AsRef<str>, U: AsRef<str>>(cand: &[T], reference: &[U], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, cand.len().saturating_sub(n - 1))
}

/// ROUGE-N with clipped overlap. `n == 0` scores zero.
pub fn rouge_n<T: AsRef<str>, U: AsRef<str>>(cand: &[T], reference: &[U], n: usize) -> RougeScore {
    if n == 0 {
        return RougeScore::default();
    }
    let (hits, total) = clipped_overlap(cand, reference, n);
    RougeScore::from_counts(hits, total, reference.len().saturating_sub(n - 1))
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_len<T: AsRef<str>, U: AsRef<str>>(a: &[T], b: &[U]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: AsRef<str>, U: AsRef<str>>(cand: &[T], reference: &[U]) -> RougeScore {
    RougeScore::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct BleuScore {
    pub score: f64,
    /// Smoothed modified precisions for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

/// Sentence BLEU with clipped precisions against any number of references.
///
/// An order whose clipped match count is zero is smoothed to
/// `1 / (max(total, 1) + 1)`. Empty candidates or references score zero.
pub fn bleu<T: AsRef<str>, U: AsRef<str>>(cand: &[T], references: &[Vec<U>], max_n: usize) -> BleuScore {
    let refs: Vec<&Vec<U>> = references.iter().filter(|r| !r.is_empty()).collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return BleuScore::default();
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let c = ngram_counts(cand, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let hits: usize = c
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(n - 1).max(1);
        precisions.push(if hits == 0 {
            1.0 / (total + 1) as f64
        } else {
            hits as f64 / total as f64
        });
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty refs");
    let brevity_penalty = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
    BleuScore {
        score: brevity_penalty * log_mean.exp(),
        precisions,
        brevity_penalty,
    }
}

/// All four metrics for one candidate/reference text pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct PairScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu4: f64,
}

pub fn score_pair(candidate: &str, reference: &str) -> PairScores {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    PairScores {
        rouge1: rouge_n(&c, &r, 1).f1,
        rouge2: rouge_n(&c, &r, 2).f1,
        rouge_l: rouge_l(&c, &r).f1,
        bleu4: bleu(&c, std::slice::from_ref(&r), 4).score,
    }
}
