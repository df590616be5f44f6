use crate::tinylm::{
    gaussian, layer_param, lora_a_name, lora_b_name, prefix_k_name, prefix_v_name, LoraSpec, ModelConfig, ParamSet,
    Tensor, INIT_STD,
};

use super::PeftError;

/// Query, key, value and output projections of every layer.
pub fn default_lora_targets(cfg: &ModelConfig) -> Vec<String> {
    (0..cfg.n_layers)
        .flat_map(|l| {
            ["attn.wq", "attn.wk", "attn.wv", "attn.wo"]
                .into_iter()
                .map(move |s| layer_param(l, s))
        })
        .collect()
}

/// Default LoRA scaling: `alpha = 2 r`.
pub fn default_alpha(rank: usize) -> f32 {
    2.0 * rank as f32
}

/// Freezes the base model and attaches LoRA factors to each target.
///
/// `A` (`r × d_in`) is drawn from N(0, 1/d_in) and `B` (`d_out × r`) starts at
/// zero, so the effective weight equals the base weight until `B` moves.
pub fn attach_lora(
    params: &ParamSet,
    cfg: &ModelConfig,
    targets: &[String],
    rank: usize,
    alpha: f32,
) -> Result<(ParamSet, ModelConfig), PeftError> {
    if rank == 0 {
        return Err(PeftError::InvalidRank);
    }
    let mut out = params.clone();
    let mut cfg = cfg.clone();
    out.freeze_all();
    for target in targets {
        let base = params
            .tensor(target)
            .map_err(|_| PeftError::UnknownTarget(target.clone()))?;
        let [d_out, d_in] = *base.shape() else {
            return Err(PeftError::NonMatrixTarget(target.clone()));
        };
        if cfg.adapters.lora.contains_key(target) {
            return Err(PeftError::AlreadyAdapted(target.clone()));
        }
        let a_name = lora_a_name(target);
        let std = 1.0 / (d_in as f64).sqrt();
        out.insert(a_name.clone(), gaussian(cfg.seed, &a_name, vec![rank, d_in], std), true);
        out.insert(lora_b_name(target), Tensor::zeros(vec![d_out, rank]), true);
        cfg.adapters.lora.insert(target.clone(), LoraSpec { rank, alpha });
    }
    Ok((out, cfg))
}

/// Freezes the base model and adds `prefix_len` trainable key/value slots per
/// layer, initialized from N(0, 0.02). Prefixes only extend the attention
/// keys and values; the output sequence keeps its length.
pub fn attach_prefix(
    params: &ParamSet,
    cfg: &ModelConfig,
    prefix_len: usize,
) -> Result<(ParamSet, ModelConfig), PeftError> {
    if prefix_len == 0 {
        return Err(PeftError::InvalidPrefixLen);
    }
    if cfg.adapters.prefix_len > 0 {
        return Err(PeftError::AlreadyAdapted("prefix".into()));
    }
    let mut out = params.clone();
    let mut cfg = cfg.clone();
    out.freeze_all();
    for l in 0..cfg.n_layers {
        for name in [prefix_k_name(l), prefix_v_name(l)] {
            let t = gaussian(cfg.seed, &name, vec![prefix_len, cfg.d_model], INIT_STD);
            out.insert(name, t, true);
        }
    }
    cfg.adapters.prefix_len = prefix_len;
    Ok((out, cfg))
}
