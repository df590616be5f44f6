use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ingest::{best_sentence, extract_keywords, terms, Block, Corpus, KEYWORD_COUNT};
use crate::tinylm::{generate, tail_within, DecodeMode, ModelConfig, ParamSet};

use super::embed::{embed_text, embedder_fingerprint};
use super::index::cosine;
use super::{nn_search, nn_search_within, svm_rerank, EmbeddingIndex, RetrievalError, SvmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AskOptions {
    /// Sources handed to generation.
    pub k: usize,
    /// Minimum cosine similarity of the best block.
    pub floor: f64,
    /// Headers used to expand the question.
    pub headers: usize,
    /// Require candidates to share a keyword with the question.
    pub keyword_filter: bool,
    pub expansion_bytes: usize,
    pub answer_bytes: usize,
    pub svm: SvmParams,
}

impl Default for AskOptions {
    fn default() -> Self {
        Self {
            k: 3,
            floor: 0.1,
            headers: 3,
            keyword_filter: false,
            expansion_bytes: 48,
            answer_bytes: 64,
            svm: SvmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceRef {
    pub block_id: String,
    pub header: String,
    /// Cosine similarity between the expanded question and the block.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub text: String,
    pub sources: Vec<SourceRef>,
    pub expanded_question: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerOutcome {
    Answered(Answer),
    /// No block passed the similarity floor.
    NoContext {
        expanded_question: String,
        best_score: Option<f64>,
    },
}

fn clean_generation(text: &str) -> String {
    let line = text.lines().next().unwrap_or("");
    let kept: String = line
        .chars()
        .map(|c| {
            if c.is_control() || c == char::REPLACEMENT_CHARACTER {
                ' '
            } else {
                c
            }
        })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Prompt tail that leaves room for `max_new` generated bytes, keeping at
/// least half the context for the prompt.
fn prompt_tail<'a>(prompt: &'a str, cfg: &ModelConfig, max_new: usize) -> &'a str {
    let budget = cfg.context_len.saturating_sub(max_new).max(cfg.context_len / 2);
    tail_within(prompt, budget)
}

fn check_fingerprint(index: &EmbeddingIndex, params: &ParamSet, cfg: &ModelConfig) -> Result<(), RetrievalError> {
    let model = embedder_fingerprint(params, cfg);
    if index.fingerprint != model {
        return Err(RetrievalError::FingerprintMismatch {
            index: index.fingerprint,
            model,
        });
    }
    Ok(())
}

/// The question followed by a greedy elaboration prompted with the headers of
/// the `h` blocks nearest to the raw question. Falls back to the question
/// alone when the elaboration has no alphanumeric content.
pub fn expand_query(
    params: &ParamSet,
    cfg: &ModelConfig,
    question: &str,
    index: &EmbeddingIndex,
    corpus: &Corpus,
    h: usize,
    max_bytes: usize,
) -> Result<String, RetrievalError> {
    let mut headers: Vec<&str> = Vec::new();
    if h > 0 && !index.is_empty() && question.chars().any(char::is_alphanumeric) {
        let q = embed_text(params, cfg, question)?;
        for hit in nn_search(index, &q, h)? {
            if let Some(b) = corpus.block(&hit.block_id) {
                if !headers.contains(&b.header.as_str()) {
                    headers.push(&b.header);
                }
            }
        }
    }
    let prompt = format!(
        "You restate questions in more detail using related topics.\nTopics: {}\nQuestion: {}\nDetailed question:",
        headers.join("; "),
        question
    );
    let out = generate(
        params,
        cfg,
        prompt_tail(&prompt, cfg, max_bytes),
        max_bytes,
        DecodeMode::Greedy,
    )?;
    let elaboration = clean_generation(&out);
    if elaboration.chars().any(char::is_alphanumeric) {
        Ok(format!("{question} {elaboration}"))
    } else {
        Ok(question.to_string())
    }
}

/// Blocks sharing at least one term with `keywords`.
pub fn keyword_allows(block: &Block, keywords: &BTreeSet<String>) -> bool {
    block.metadata.keywords.iter().any(|k| keywords.contains(k))
        || terms(&block.text).iter().any(|t| keywords.contains(t))
}

/// Generated text counts as grounded when it has at least three terms and at
/// least half of them occur in the sources.
fn grounded(text: &str, sources: &[&Block]) -> bool {
    let generated = terms(text);
    if generated.len() < 3 {
        return false;
    }
    let known: BTreeSet<String> = sources.iter().flat_map(|b| terms(&b.text)).collect();
    let hits = generated.iter().filter(|t| known.contains(*t)).count();
    2 * hits >= generated.len()
}

/// Sentence from the sources sharing the most terms with the question,
/// preferring body text over headings, earlier sources on ties.
fn extractive(question: &str, sources: &[&Block]) -> String {
    let q: BTreeSet<String> = terms(question).into_iter().collect();
    let mut best: Option<((bool, usize), String)> = None;
    for b in sources {
        let s = best_sentence(question, &b.text);
        let hits = terms(&s).into_iter().collect::<BTreeSet<_>>().intersection(&q).count();
        let key = (!s.starts_with('#'), hits);
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            best = Some((key, s));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

/// Expand, embed, search `3k` candidates, rerank with an exemplar SVM, keep
/// `k`, then answer from those blocks. `context` limits candidates to blocks
/// sharing a term with the given keyword set.
pub fn answer_question(
    params: &ParamSet,
    cfg: &ModelConfig,
    question: &str,
    index: &EmbeddingIndex,
    corpus: &Corpus,
    opts: &AskOptions,
    context: Option<&BTreeSet<String>>,
) -> Result<AnswerOutcome, RetrievalError> {
    if opts.k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if index.is_empty() || corpus.is_empty() {
        return Ok(AnswerOutcome::NoContext {
            expanded_question: question.to_string(),
            best_score: None,
        });
    }
    check_fingerprint(index, params, cfg)?;
    let expanded = expand_query(params, cfg, question, index, corpus, opts.headers, opts.expansion_bytes)?;
    let q = embed_text(params, cfg, &expanded)?;
    let query_keywords: BTreeSet<String> = if opts.keyword_filter {
        extract_keywords(question, &corpus.stats(), KEYWORD_COUNT)
            .into_iter()
            .collect()
    } else {
        BTreeSet::new()
    };
    let positions = corpus.block_positions();
    let allow = |i: usize| {
        let Some(&p) = positions.get(index.block_ids[i].as_str()) else {
            return false;
        };
        let block = &corpus.blocks[p];
        context.is_none_or(|c| keyword_allows(block, c))
            && (!opts.keyword_filter || block.metadata.keywords.iter().any(|k| query_keywords.contains(k)))
    };
    let hits = nn_search_within(index, &q, 3 * opts.k, allow)?;
    let similarity = |id: &str| index.position(id).map_or(0.0, |i| cosine(&q, index.row(i)));
    let best = hits
        .iter()
        .map(|h| similarity(&h.block_id))
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    if best.is_none_or(|b| b < opts.floor) {
        return Ok(AnswerOutcome::NoContext {
            expanded_question: expanded,
            best_score: best,
        });
    }
    let candidates: Vec<String> = hits.into_iter().map(|h| h.block_id).collect();
    let ranked = svm_rerank(index, &q, &candidates, &opts.svm)?;
    let chosen: Vec<&Block> = ranked
        .iter()
        .take(opts.k)
        .map(|(id, _)| corpus.block(id).ok_or_else(|| RetrievalError::UnknownBlock(id.clone())))
        .collect::<Result<_, _>>()?;

    let mut prompt = String::from("You answer questions using only the sources.\n");
    for (i, b) in chosen.iter().enumerate() {
        prompt.push_str(&format!("Source {}: {}\n", i + 1, b.text));
    }
    prompt.push_str(&format!("Question: {question}\nAnswer:"));
    let generated = clean_generation(&generate(
        params,
        cfg,
        prompt_tail(&prompt, cfg, opts.answer_bytes),
        opts.answer_bytes,
        DecodeMode::Greedy,
    )?);
    let text = if grounded(&generated, &chosen) {
        generated
    } else {
        extractive(question, &chosen)
    };
    Ok(AnswerOutcome::Answered(Answer {
        text,
        sources: chosen
            .iter()
            .map(|b| SourceRef {
                block_id: b.block_id.clone(),
                header: b.header.clone(),
                score: similarity(&b.block_id),
            })
            .collect(),
        expanded_question: expanded,
    }))
}
