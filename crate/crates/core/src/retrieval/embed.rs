use std::collections::BTreeMap;

use crate::digest::{fnv1a64, Fnv1a};
use crate::ingest::terms;
use crate::peft::content_hash;
use crate::tinylm::{self, ModelConfig, ParamSet};

use super::RetrievalError;

/// Hashed term buckets appended to the model vector.
pub const LEXICAL_DIM: usize = 1024;
/// Share of the squared norm given to the term part; the model part gets the rest.
pub const LEXICAL_SHARE: f64 = 0.9;

const EMBEDDER_TAG: &str = "mean-hidden+hashed-terms/v1";

pub fn embedding_dim(cfg: &ModelConfig) -> usize {
    cfg.d_model + LEXICAL_DIM
}

fn stem(term: String) -> String {
    if term.len() > 3 && term.ends_with('s') && !term.ends_with("ss") {
        term[..term.len() - 1].to_string()
    } else {
        term
    }
}

/// Signed feature hashing of `1 + ln tf` over stemmed terms, unit length
/// (all zeros when the text has no terms).
pub fn lexical_features(text: &str) -> Vec<f64> {
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for t in terms(text) {
        *tf.entry(stem(t)).or_insert(0) += 1;
    }
    let mut v = vec![0.0f64; LEXICAL_DIM];
    for (term, n) in tf {
        let h = fnv1a64(term.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % LEXICAL_DIM as u64) as usize] += sign * (1.0 + (n as f64).ln());
    }
    scale_to(&mut v, LEXICAL_SHARE.sqrt());
    v
}

fn scale_to(v: &mut [f64], length: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x *= length / norm;
        }
    }
}

/// Mean final hidden state of the model, scaled to length `sqrt(1 - share)`,
/// followed by the hashed term features scaled to `sqrt(share)`.
pub fn embed_text(params: &ParamSet, cfg: &ModelConfig, text: &str) -> Result<Vec<f32>, RetrievalError> {
    let model = tinylm::embed_text(params, cfg, text)?;
    let mut m: Vec<f64> = model.iter().map(|&x| x as f64).collect();
    scale_to(&mut m, (1.0 - LEXICAL_SHARE).sqrt());
    m.extend(lexical_features(text));
    Ok(m.into_iter().map(|x| x as f32).collect())
}

/// Ties an index to the weights, configuration and embedding recipe.
pub fn embedder_fingerprint(params: &ParamSet, cfg: &ModelConfig) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&content_hash(params).to_le_bytes());
    h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    h.update(EMBEDDER_TAG.as_bytes());
    h.update(&(LEXICAL_DIM as u64).to_le_bytes());
    h.update(&LEXICAL_SHARE.to_le_bytes());
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexical_part_has_fixed_length() {
        let v = lexical_features("Refunds refund the payment");
        let norm: f64 = v.iter().map(|x| x * x).sum();
        assert!((norm - LEXICAL_SHARE).abs() < 1e-12);
        assert!(lexical_features("the of a").iter().all(|x| *x == 0.0));
        assert_eq!(lexical_features("Refund"), lexical_features("refunds"));
    }
}
