use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{enrich_metadata, parse_blocks, Block, CorpusStats, IngestError, QAPair, RawDocument};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const INDEX_FILE: &str = "corpus.idx";

const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    format: String,
    version: u32,
}

/// Position of one block line inside the corpus file.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct IndexEntry {
    block_id: String,
    offset: u64,
    len: u64,
}

/// Documents, their blocks in document then sequence order, and QA pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub documents: Vec<RawDocument>,
    pub blocks: Vec<Block>,
    pub qa: Vec<QAPair>,
}

impl Corpus {
    /// Parses and enriches `docs`, skipping any whose id is already present.
    /// Keywords of every block are recomputed against the new document set.
    /// Returns the number of blocks added.
    pub fn add_documents(&mut self, docs: Vec<RawDocument>) -> Result<usize, IngestError> {
        let mut known: BTreeSet<String> = self.documents.iter().map(|d| d.doc_id.clone()).collect();
        let mut ids: BTreeSet<String> = self.blocks.iter().map(|b| b.block_id.clone()).collect();
        let before = self.blocks.len();
        for doc in docs {
            if !known.insert(doc.doc_id.clone()) {
                continue;
            }
            for b in parse_blocks(&doc) {
                if !ids.insert(b.block_id.clone()) {
                    return Err(IngestError::DuplicateBlockId(b.block_id));
                }
                self.blocks.push(b);
            }
            self.documents.push(doc);
        }
        let added = self.blocks.len() - before;
        if added > 0 {
            self.reindex_keywords();
        }
        Ok(added)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::from_documents(&self.documents)
    }

    fn reindex_keywords(&mut self) {
        let stats = self.stats();
        for b in &mut self.blocks {
            *b = enrich_metadata(b.clone(), &stats);
        }
    }

    pub fn block(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.block_id == id)
    }

    pub fn document(&self, doc_id: &str) -> Option<&RawDocument> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn block_positions(&self) -> HashMap<&str, usize> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.block_id.as_str(), i))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Checks id uniqueness, span fidelity and QA provenance.
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut ids = BTreeSet::new();
        for b in &self.blocks {
            if !ids.insert(b.block_id.as_str()) {
                return Err(IngestError::DuplicateBlockId(b.block_id.clone()));
            }
            let doc = self.document(&b.doc_id).ok_or_else(|| {
                IngestError::Corrupt(format!("block {} names unknown document {}", b.block_id, b.doc_id))
            })?;
            if doc.text.get(b.byte_span.0..b.byte_span.1) != Some(b.text.as_str()) {
                return Err(IngestError::Corrupt(format!(
                    "span of block {} does not match its text",
                    b.block_id
                )));
            }
        }
        for q in &self.qa {
            if !ids.contains(q.block_id.as_str()) {
                return Err(IngestError::UnknownBlock(q.block_id.clone()));
            }
        }
        Ok(())
    }
}

fn header_line(format: &str) -> String {
    serde_json::to_string(&Header {
        format: format.to_string(),
        version: VERSION,
    })
    .expect("header serializes")
}

/// Header line then one JSON object per line. Returns the byte offset and
/// length of each record line.
fn write_jsonl<T: Serialize>(path: &Path, format: &str, items: &[T]) -> Result<Vec<(u64, u64)>, IngestError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("corpus");
    let tmp = path.with_file_name(format!("{name}.tmp"));
    let mut buf = Vec::new();
    writeln!(buf, "{}", header_line(format))?;
    let mut spans = Vec::with_capacity(items.len());
    for item in items {
        let start = buf.len() as u64;
        serde_json::to_writer(&mut buf, item)?;
        spans.push((start, buf.len() as u64 - start));
        buf.push(b'\n');
    }
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(spans)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    let expected = header_line(format);
    if first != expected {
        return Err(IngestError::FormatVersionMismatch {
            file: path.display().to_string(),
            expected,
            found: first.to_string(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(IngestError::from))
        .collect()
}

/// Writes the corpus into `dir`: blocks, QA pairs and documents as JSON lines,
/// plus a sidecar index of block line offsets.
pub fn persist_corpus(corpus: &Corpus, dir: &Path) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(DOCUMENTS_FILE), "fedchat-documents", &corpus.documents)?;
    write_jsonl(&dir.join(QA_FILE), "fedchat-qa", &corpus.qa)?;
    let spans = write_jsonl(&dir.join(CORPUS_FILE), "fedchat-corpus", &corpus.blocks)?;
    let entries: Vec<IndexEntry> = corpus
        .blocks
        .iter()
        .zip(spans)
        .map(|(b, (offset, len))| IndexEntry {
            block_id: b.block_id.clone(),
            offset,
            len,
        })
        .collect();
    write_jsonl(&dir.join(INDEX_FILE), "fedchat-corpus-index", &entries)?;
    Ok(())
}

/// Reads a corpus written by [`persist_corpus`]. A directory without a corpus
/// file loads as empty.
pub fn load_corpus(dir: &Path) -> Result<Corpus, IngestError> {
    if !dir.join(CORPUS_FILE).exists() {
        return Ok(Corpus::default());
    }
    let blocks: Vec<Block> = read_jsonl(&dir.join(CORPUS_FILE), "fedchat-corpus")?;
    let qa = read_jsonl(&dir.join(QA_FILE), "fedchat-qa")?;
    let documents = read_jsonl(&dir.join(DOCUMENTS_FILE), "fedchat-documents")?;
    let index: Vec<IndexEntry> = read_jsonl(&dir.join(INDEX_FILE), "fedchat-corpus-index")?;
    if index.len() != blocks.len() || index.iter().zip(&blocks).any(|(e, b)| e.block_id != b.block_id) {
        return Err(IngestError::Corrupt(
            "sidecar index does not match the corpus file".into(),
        ));
    }
    Ok(Corpus { documents, blocks, qa })
}
