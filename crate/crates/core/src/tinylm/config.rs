use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, Tokenizer};

/// Low-rank adapter settings for one 2-D parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f32,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }
}

/// Adapters attached to the base model. Empty by default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Target parameter name -> adapter settings.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lora: BTreeMap<String, LoraSpec>,
    /// Number of trainable key/value prefix slots per layer (0 = none).
    #[serde(default)]
    pub prefix_len: usize,
}

impl AdapterConfig {
    pub fn is_empty(&self) -> bool {
        self.lora.is_empty() && self.prefix_len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "AdapterConfig::is_empty")]
    pub adapters: AdapterConfig,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: trains on a CPU in minutes.
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            context_len: 128,
            vocab_size: Tokenizer::VOCAB_SIZE,
            seed: 0,
            adapters: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer, model, head and feed-forward sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            return bad(format!("context_len {} < 2", self.context_len));
        }
        if self.vocab_size < Tokenizer::VOCAB_SIZE {
            return bad(format!(
                "vocab_size {} cannot hold the byte tokenizer ({})",
                self.vocab_size,
                Tokenizer::VOCAB_SIZE
            ));
        }
        for (name, spec) in &self.adapters.lora {
            if spec.rank == 0 {
                return bad(format!("lora rank for `{name}` must be >= 1"));
            }
        }
        Ok(())
    }
}
