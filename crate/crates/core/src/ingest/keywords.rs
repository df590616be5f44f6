use std::collections::{BTreeMap, BTreeSet};

use super::{Block, RawDocument};

pub const KEYWORD_COUNT: usize = 5;

/// Function words that never become keywords.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "before", "but", "by",
    "can", "do", "does", "each", "for", "from", "has", "have", "how", "if", "in", "into", "is", "it", "its", "may",
    "more", "most", "must", "no", "not", "of", "on", "once", "one", "only", "or", "other", "our", "so", "some", "such",
    "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "to", "up", "was", "we",
    "were", "what", "when", "where", "which", "while", "who", "why", "will", "with", "within", "you", "your",
];

/// Lowercased alphanumeric runs of two or more characters, minus stopwords.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 2)
        .map(str::to_lowercase)
        .filter(|w| STOPWORDS.binary_search(&w.as_str()).is_err())
        .collect()
}

/// Document frequencies over a set of documents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut df = BTreeMap::new();
        for t in texts {
            let unique: BTreeSet<String> = terms(t.as_ref()).into_iter().collect();
            for term in unique {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        Self {
            n_docs: texts.len(),
            df,
        }
    }

    pub fn from_documents(docs: &[RawDocument]) -> Self {
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        Self::from_texts(&texts)
    }

    /// `ln((N + 1) / (df + 1)) + 1`
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((self.n_docs as f64 + 1.0) / (df + 1.0)).ln() + 1.0
    }
}

/// The `k` terms with the highest `(1 + ln tf) * idf`, ties broken by term.
pub fn extract_keywords(text: &str, stats: &CorpusStats, k: usize) -> Vec<String> {
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for t in terms(text) {
        *tf.entry(t).or_insert(0) += 1;
    }
    let mut scored: Vec<(f64, String)> = tf
        .into_iter()
        .map(|(term, n)| ((1.0 + (n as f64).ln()) * stats.idf(&term), term))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, t)| t).collect()
}

/// Fills in keywords and the character count.
pub fn enrich_metadata(mut block: Block, stats: &CorpusStats) -> Block {
    block.metadata.keywords = extract_keywords(&block.text, stats, KEYWORD_COUNT);
    block.metadata.char_count = block.text.chars().count();
    block
}
