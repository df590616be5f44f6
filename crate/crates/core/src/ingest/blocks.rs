use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{Digest, Fnv1a};

use super::RawDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMetadata {
    pub keywords: Vec<String>,
    pub char_count: usize,
    pub created_at: DateTime<Utc>,
}

/// A paragraph of a document, the unit of retrieval and citation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: String,
    pub doc_id: String,
    pub seq: usize,
    pub header: String,
    pub text: String,
    /// Byte range of `text` in the document.
    pub byte_span: (usize, usize),
    pub metadata: BlockMetadata,
}

/// Digest of document id, position and text.
pub fn block_id(doc_id: &str, seq: usize, text: &str) -> String {
    let mut h = Fnv1a::new();
    h.update(doc_id.as_bytes());
    h.update(&[0]);
    h.update(&(seq as u64).to_le_bytes());
    h.update(text.as_bytes());
    Digest(h.finish()).to_string()
}

/// The first line when it looks like a heading (a `#` line, or at most 80
/// characters without a closing period), otherwise the first eight words.
pub fn detect_header(text: &str) -> String {
    let first = text.lines().next().unwrap_or("").trim();
    if first.starts_with('#') {
        let h = first.trim_start_matches('#').trim();
        if !h.is_empty() {
            return h.to_string();
        }
    }
    if !first.is_empty() && first.chars().count() <= 80 && !first.ends_with('.') {
        return first.to_string();
    }
    text.split_whitespace().take(8).collect::<Vec<_>>().join(" ")
}

/// Splits a document at blank lines. Each block's span is trimmed of
/// surrounding whitespace and slices the document to exactly its text.
/// Keywords are left empty until [`super::enrich_metadata`].
pub fn parse_blocks(doc: &RawDocument) -> Vec<Block> {
    let text = &doc.text;
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if content.trim().is_empty() {
            if let Some(s) = start.take() {
                spans.push((s, end));
            }
        } else {
            let lead = content.len() - content.trim_start().len();
            if start.is_none() {
                start = Some(pos + lead);
            }
            end = pos + content.trim_end().len();
        }
        pos += line.len();
    }
    if let Some(s) = start {
        spans.push((s, end));
    }
    spans
        .into_iter()
        .enumerate()
        .map(|(seq, (a, b))| {
            let body = &text[a..b];
            Block {
                block_id: block_id(&doc.doc_id, seq, body),
                doc_id: doc.doc_id.clone(),
                seq,
                header: detect_header(body),
                text: body.to_string(),
                byte_span: (a, b),
                metadata: BlockMetadata {
                    keywords: Vec::new(),
                    char_count: body.chars().count(),
                    created_at: doc.fetched_at,
                },
            }
        })
        .collect()
}
