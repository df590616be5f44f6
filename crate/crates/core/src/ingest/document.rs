use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{fnv1a64, Digest};

use super::IngestError;

/// A source document as fetched. `doc_id` is the digest of the text bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub source_uri: String,
    pub fetched_at: DateTime<Utc>,
    pub text: String,
}

impl RawDocument {
    pub fn new(source_uri: impl Into<String>, text: impl Into<String>, fetched_at: DateTime<Utc>) -> Self {
        let text = text.into();
        Self {
            doc_id: Digest(fnv1a64(text.as_bytes())).to_string(),
            source_uri: source_uri.into(),
            fetched_at,
            text,
        }
    }

    pub fn from_bytes(
        source_uri: impl Into<String>,
        bytes: Vec<u8>,
        fetched_at: DateTime<Utc>,
    ) -> Result<Self, IngestError> {
        let source_uri = source_uri.into();
        match String::from_utf8(bytes) {
            Ok(text) => Ok(Self::new(source_uri, text, fetched_at)),
            Err(_) => Err(IngestError::InvalidEncoding(source_uri)),
        }
    }
}

const BLOCK_TAGS: [&str; 12] = [
    "p", "div", "br", "li", "h1", "h2", "h3", "h4", "h5", "h6", "tr", "section",
];

/// Removes markup, keeping text. Block-level tags become paragraph breaks,
/// script and style bodies are dropped, and the basic entities are decoded.
pub fn strip_tags(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut rest = html;
    while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('>') else {
            rest = &rest[open..];
            break;
        };
        let tag = &rest[open + 1..open + close];
        rest = &rest[open + close + 1..];
        let name: String = tag
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if !tag.starts_with('/') && (name == "script" || name == "style") {
            let end = format!("</{name}");
            match rest.to_ascii_lowercase().find(&end) {
                Some(i) => {
                    rest = &rest[i..];
                    if let Some(gt) = rest.find('>') {
                        rest = &rest[gt + 1..];
                    }
                }
                None => rest = "",
            }
            continue;
        }
        if BLOCK_TAGS.contains(&name.as_str()) {
            out.push_str("\n\n");
        }
    }
    out.push_str(rest);
    let decoded = out
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&nbsp;", " ")
        .replace("&amp;", "&");
    let mut cleaned = String::with_capacity(decoded.len());
    for line in decoded.lines() {
        cleaned.push_str(line.trim());
        cleaned.push('\n');
    }
    cleaned
}

fn is_text_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("txt" | "md" | "markdown" | "html" | "htm")
    )
}

fn is_url_list(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("urls")
}

fn read_document(path: &Path, uri: String) -> Result<RawDocument, IngestError> {
    let bytes = std::fs::read(path)?;
    let fetched_at: DateTime<Utc> = std::fs::metadata(path)?.modified()?.into();
    let mut doc = RawDocument::from_bytes(uri, bytes, fetched_at)?;
    let html = matches!(path.extension().and_then(|e| e.to_str()), Some("html" | "htm"));
    if html {
        doc = RawDocument::new(doc.source_uri, strip_tags(&doc.text), doc.fetched_at);
    }
    Ok(doc)
}

fn resolve_entry(list: &Path, entry: &str) -> Result<PathBuf, IngestError> {
    if let Some(path) = entry.strip_prefix("file://") {
        return Ok(PathBuf::from(path));
    }
    if entry.contains("://") {
        return Err(IngestError::UnsupportedSource(entry.to_string()));
    }
    let p = PathBuf::from(entry);
    Ok(if p.is_absolute() {
        p
    } else {
        list.parent().unwrap_or(Path::new(".")).join(p)
    })
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect(&e, out)?;
        }
    } else if is_text_file(path) || is_url_list(path) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Reads every text, Markdown and HTML file under `root` in path order. Files
/// ending in `.urls` list further sources, one per line, as relative paths,
/// absolute paths or `file://` URIs; `#` starts a comment line.
pub fn load_documents(root: &Path) -> Result<Vec<RawDocument>, IngestError> {
    let mut files = Vec::new();
    collect(root, &mut files)?;
    let mut docs = Vec::new();
    for f in files {
        if is_url_list(&f) {
            let list = std::fs::read_to_string(&f)?;
            for line in list
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
            {
                let path = resolve_entry(&f, line)?;
                docs.push(read_document(&path, line.to_string())?);
            }
        } else {
            docs.push(read_document(&f, f.display().to_string())?);
        }
    }
    Ok(docs)
}
