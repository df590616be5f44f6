use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::FedError;
use crate::tinylm::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    #[default]
    Full,
    Diff,
    AdaptersOnly,
}

impl fmt::Display for TransportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportMode::Full => "full",
            TransportMode::Diff => "diff",
            TransportMode::AdaptersOnly => "adapters-only",
        })
    }
}

impl FromStr for TransportMode {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "diff" => Ok(Self::Diff),
            "adapters-only" => Ok(Self::AdaptersOnly),
            other => Err(FedError::InvalidConfig(format!("unknown transport mode `{other}`"))),
        }
    }
}

/// Uplink quantization: `"none"` or `8` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantBits {
    #[default]
    None,
    Bits(u8),
}

impl Serialize for QuantBits {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            QuantBits::None => s.serialize_str("none"),
            QuantBits::Bits(b) => s.serialize_u8(*b),
        }
    }
}

impl<'de> Deserialize<'de> for QuantBits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u8),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(b) => Ok(QuantBits::Bits(b)),
            Repr::Str(s) if s == "none" => Ok(QuantBits::None),
            Repr::Str(s) => s
                .parse()
                .map(QuantBits::Bits)
                .map_err(|_| serde::de::Error::custom(format!("quant_bits must be \"none\" or 8, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub num_clients: usize,
    pub local_steps: usize,
    pub lr: f32,
    pub transport_mode: TransportMode,
    pub quant_bits: QuantBits,
    pub rounds: usize,
    pub eval_every: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            local_steps: 20,
            lr: 0.05,
            transport_mode: TransportMode::Full,
            quant_bits: QuantBits::None,
            rounds: 5,
            eval_every: 1,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.num_clients == 0 {
            return Err(FedError::InvalidConfig("num_clients must be at least 1".into()));
        }
        if self.local_steps == 0 {
            return Err(FedError::InvalidConfig("local_steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(FedError::InvalidConfig("eval_every must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(FedError::InvalidConfig(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        match self.quant_bits {
            QuantBits::Bits(b) if b != 8 => Err(FedError::UnsupportedBits(b)),
            QuantBits::Bits(_) if self.transport_mode == TransportMode::Diff => Err(FedError::InvalidConfig(
                "quantized uplink is not combined with diff transport".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// Every weight is trainable.
    None,
    #[default]
    Lora,
    Prefix,
}

/// A complete federated run: round settings plus data, model and adapter setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub round: RoundConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub adapter: AdapterMode,
    pub lora_rank: usize,
    /// Defaults to `2 * lora_rank`.
    pub lora_alpha: Option<f32>,
    pub prefix_len: usize,
    /// Fraction of documents held out for evaluation (at least one document).
    pub eval_fraction: f64,
    /// Evaluation loss windows.
    pub eval_windows: usize,
    /// Prompt/continuation pairs scored with ROUGE and BLEU.
    pub eval_pairs: usize,
    /// Bytes of prompt and of reference in each evaluation pair.
    pub eval_pair_bytes: usize,
    /// Threshold for diff transport; 0 keeps transport lossless.
    pub diff_tau: f32,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            round: RoundConfig::default(),
            seed: 7,
            batch_size: 4,
            seq_len: 64,
            adapter: AdapterMode::Lora,
            lora_rank: 4,
            lora_alpha: None,
            prefix_len: 4,
            eval_fraction: 0.1,
            eval_windows: 8,
            eval_pairs: 8,
            eval_pair_bytes: 32,
            diff_tau: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        self.round.validate()?;
        self.model.validate()?;
        if self.seq_len == 0 || self.seq_len > self.model.context_len {
            return Err(FedError::InvalidConfig(format!(
                "seq_len must be in 1..={}",
                self.model.context_len
            )));
        }
        if self.batch_size == 0 {
            return Err(FedError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(FedError::InvalidConfig("eval_fraction must be in [0, 1)".into()));
        }
        if 2 * self.eval_pair_bytes > self.model.context_len {
            return Err(FedError::InvalidConfig("eval pairs must fit the context".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, FedError> {
        let cfg: Self = toml::from_str(text).map_err(|e| FedError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
