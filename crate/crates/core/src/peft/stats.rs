use serde::Serialize;

use crate::tinylm::ParamSet;

/// Parameter accounting for a (possibly adapted) model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamStats {
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_percent: f64,
    pub model_bytes: usize,
    pub trainable_bytes: usize,
    /// LoRA targets whose rank exceeds `min(d_in, d_out)`; the rank is kept as given.
    pub oversized_rank_targets: Vec<String>,
}

pub fn param_stats(params: &ParamSet) -> ParamStats {
    let total_params = params.numel();
    let trainable_params = params.trainable_numel();
    let trainable_percent = if total_params == 0 {
        0.0
    } else {
        100.0 * trainable_params as f64 / total_params as f64
    };
    let oversized_rank_targets = params
        .iter()
        .filter_map(|(name, p)| {
            let target = name.strip_suffix(".lora_a")?;
            let rank = *p.tensor.shape().first()?;
            let base = params.get(target)?;
            match base.tensor.shape() {
                [d_out, d_in] if rank > (*d_out).min(*d_in) => Some(target.to_string()),
                _ => None,
            }
        })
        .collect();
    ParamStats {
        total_params,
        trainable_params,
        trainable_percent,
        model_bytes: 4 * total_params,
        trainable_bytes: 4 * trainable_params,
        oversized_rank_targets,
    }
}

/// Reference trainable-parameter shares reported for GPT-2-scale federated
/// fine-tuning, in percent. Shown alongside local stats; not reproduced here.
pub const REFERENCE_TRAINABLE_PERCENT: [(&str, f64); 3] =
    [("LoRA", 0.058), ("P-Tuning-V2", 0.475), ("Checkpoint", 0.116)];
