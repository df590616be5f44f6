use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tinylm::{
    generate, grad, loss_value, sgd_step, tail_within, DecodeMode, ModelConfig, ParamSet, TokenId, Tokenizer,
    TrainBatch,
};

use super::{terms, Block, IngestError};

/// A generated question with an answer extracted from its block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub block_id: String,
}

/// A role description with example input/output pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePromptSet {
    pub role: String,
    pub pairs: Vec<(String, String)>,
}

impl RolePromptSet {
    pub fn new(role: impl Into<String>, pairs: Vec<(String, String)>) -> Self {
        Self {
            role: role.into(),
            pairs,
        }
    }

    pub fn m(&self) -> usize {
        self.pairs.len()
    }

    /// Reads `Question:` / `Answer:` line pairs; anything else is skipped.
    pub fn parse(role: impl Into<String>, text: &str) -> Self {
        let mut pairs = Vec::new();
        let mut question: Option<String> = None;
        for line in text.lines().map(str::trim) {
            if let Some(q) = line.strip_prefix("Question:") {
                question = Some(q.trim().to_string());
            } else if let Some(a) = line.strip_prefix("Answer:") {
                if let Some(q) = question.take() {
                    pairs.push((q, a.trim().to_string()));
                }
            }
        }
        Self::new(role, pairs)
    }

    /// The text the model sees before the output of pair `i`.
    pub fn prompt(&self, input: &str) -> String {
        format!("{}\nQuestion: {}\nAnswer: ", self.role, input)
    }
}

/// Tokens of one serialized pair and the index of its first output token. Long
/// pairs lose prompt tokens from the front first, then output tokens from the end.
fn serialize_pair(role: &RolePromptSet, input: &str, output: &str, seq_len: usize) -> (Vec<TokenId>, usize) {
    let tok = Tokenizer::new();
    let mut seq = tok.tokenize(role.prompt(input).as_bytes(), true, false);
    let mut from = seq.len();
    seq.extend(tok.tokenize(output.as_bytes(), false, true));
    let max = seq_len + 1;
    if seq.len() > max {
        let cut = (seq.len() - max).min(from - 1);
        seq.drain(..cut);
        from -= cut;
        seq.truncate(max);
    }
    (seq, from)
}

/// One row per pair, loss restricted to the output segment and its EOS.
pub fn role_batch(role: &RolePromptSet, seq_len: usize) -> Result<TrainBatch, IngestError> {
    if role.pairs.is_empty() {
        return Err(IngestError::EmptyPromptSet);
    }
    let (seqs, starts): (Vec<_>, Vec<_>) = role
        .pairs
        .iter()
        .map(|(x, y)| serialize_pair(role, x, y, seq_len))
        .unzip();
    Ok(TrainBatch::from_supervised(&seqs, &starts, seq_len)?)
}

/// Mean output-token loss over the pairs.
pub fn role_loss(params: &ParamSet, cfg: &ModelConfig, role: &RolePromptSet) -> Result<f64, IngestError> {
    Ok(loss_value(params, cfg, &role_batch(role, cfg.context_len)?)?)
}

/// `steps` full-batch SGD steps on the serialized pairs.
pub fn fine_tune_role(
    params: &ParamSet,
    cfg: &ModelConfig,
    role: &RolePromptSet,
    lr: f32,
    steps: usize,
) -> Result<ParamSet, IngestError> {
    let batch = role_batch(role, cfg.context_len)?;
    let mut theta = params.clone();
    for _ in 0..steps {
        theta = sgd_step(&theta, &grad(&theta, cfg, &batch)?, lr)?;
    }
    Ok(theta)
}

const QUESTION_BYTES: usize = 48;

fn clean_question(line: &str) -> Option<String> {
    let line = line.trim();
    let line = line.strip_prefix("Question:").unwrap_or(line).trim();
    let words = line
        .split_whitespace()
        .filter(|w| w.chars().filter(|c| c.is_alphabetic()).count() >= 2)
        .count();
    if words < 3 || line.len() > 120 || line.chars().any(char::is_control) {
        return None;
    }
    let mut q = line.trim_end_matches(['.', '?', '!']).to_string();
    q.push('?');
    Some(q)
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let end = matches!(b, b'.' | b'?' | b'!') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace());
        if end || b == b'\n' {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// The block sentence sharing the most distinct terms with `question`,
/// earliest on ties. Markdown heading lines are only used when nothing else is left.
pub fn best_sentence(question: &str, text: &str) -> String {
    let q: BTreeSet<String> = terms(question).into_iter().collect();
    let all = sentences(text);
    let body: Vec<&str> = all.iter().copied().filter(|s| !s.starts_with('#')).collect();
    let mut best = ("", 0usize);
    for s in if body.is_empty() { all } else { body } {
        let hits = terms(s).into_iter().collect::<BTreeSet<_>>().intersection(&q).count();
        if best.0.is_empty() || hits > best.1 {
            best = (s, hits);
        }
    }
    best.0.to_string()
}

/// Greedy-decodes up to `max_q` questions about `block` from a role prompt
/// with exemplars. Lines that are not plausible questions are replaced by
/// keyword templates. Answers are sentences picked from the block.
pub fn generate_qa(
    params: &ParamSet,
    cfg: &ModelConfig,
    block: &Block,
    role: &RolePromptSet,
    max_q: usize,
) -> Result<Vec<QAPair>, IngestError> {
    if !block.text.chars().any(char::is_alphanumeric) {
        return Err(IngestError::EmptyBlock(block.block_id.clone()));
    }
    if max_q == 0 {
        return Ok(Vec::new());
    }
    let mut prompt = format!("{}\n", role.role);
    for (x, y) in &role.pairs {
        prompt.push_str(&format!("Question: {x}\nAnswer: {y}\n\n"));
    }
    prompt.push_str(&format!("Text: {}\nQuestion:", block.text));
    let prompt = tail_within(&prompt, cfg.context_len);
    let generated = generate(params, cfg, prompt, QUESTION_BYTES * max_q, DecodeMode::Greedy)?;

    let mut questions: Vec<String> = Vec::new();
    for q in generated.lines().filter_map(clean_question) {
        if questions.len() < max_q && !questions.contains(&q) {
            questions.push(q);
        }
    }
    let templates = block
        .metadata
        .keywords
        .iter()
        .map(|k| format!("What does the text say about {k}?"))
        .chain(std::iter::once(format!("What is described in {}?", block.header)));
    for q in templates {
        if questions.len() >= max_q {
            break;
        }
        if !questions.contains(&q) {
            questions.push(q);
        }
    }
    Ok(questions
        .into_iter()
        .map(|question| QAPair {
            answer: best_sentence(&question, &block.text),
            question,
            block_id: block.block_id.clone(),
        })
        .collect())
}
