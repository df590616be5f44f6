use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fedchat_core::retrieval::Metric;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const CONFIG_ENV: &str = "FEDCHAT_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "fedchat.toml";

/// A named keyword set restricting retrieval candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFilter {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub corpus_dir: PathBuf,
    pub model_path: PathBuf,
    pub index_path: PathBuf,
    pub listen_addr: String,
    pub k_sources: usize,
    pub metric: Metric,
    pub context_filters: Vec<ContextFilter>,
    /// Training history served by `/api/metrics`.
    pub history_path: PathBuf,
    pub similarity_floor: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "store".into(),
            model_path: "model.tlm".into(),
            index_path: "store/index.tvi".into(),
            listen_addr: "127.0.0.1:8080".into(),
            k_sources: 3,
            metric: Metric::Cosine,
            context_filters: Vec::new(),
            history_path: "history.csv".into(),
            similarity_floor: 0.1,
        }
    }
}

impl ServiceConfig {
    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ServiceError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        for p in [
            &mut cfg.corpus_dir,
            &mut cfg.model_path,
            &mut cfg.index_path,
            &mut cfg.history_path,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// The explicit path, else `$FEDCHAT_CONFIG`, else `fedchat.toml` in the
    /// working directory, else built-in defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ServiceError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Self::load(Path::new(&p));
        }
        let default = Path::new(DEFAULT_CONFIG_FILE);
        if default.exists() {
            return Self::load(default);
        }
        let cfg = Self::default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.k_sources == 0 {
            return bad("k_sources must be at least 1".into());
        }
        if !self.similarity_floor.is_finite() {
            return bad("similarity_floor must be finite".into());
        }
        match self.listen_addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {}
            _ => return bad(format!("listen_addr `{}` is not host:port", self.listen_addr)),
        }
        if self.corpus_dir.exists() && !self.corpus_dir.is_dir() {
            return bad(format!("corpus_dir {} is not a directory", self.corpus_dir.display()));
        }
        if self.index_path.is_dir() {
            return bad(format!("index_path {} is a directory", self.index_path.display()));
        }
        let mut names = BTreeSet::new();
        for c in &self.context_filters {
            if c.name.trim().is_empty() {
                return bad("context filter with empty name".into());
            }
            if !names.insert(c.name.as_str()) {
                return bad(format!("context filter `{}` defined twice", c.name));
            }
            if c.keywords.iter().all(|k| k.trim().is_empty()) {
                return bad(format!("context filter `{}` has no keywords", c.name));
            }
        }
        Ok(())
    }

    /// Keyword sets by context name, lowercased to match block terms.
    pub fn contexts(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.context_filters
            .iter()
            .map(|c| {
                let words = c
                    .keywords
                    .iter()
                    .map(|k| k.trim().to_lowercase())
                    .filter(|k| !k.is_empty())
                    .collect();
                (c.name.clone(), words)
            })
            .collect()
    }
}
