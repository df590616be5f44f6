use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingIndex, RetrievalError};

/// Linear classifier `w . x + b` on unit-length inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
    pub epochs: usize,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 0.1,
            epochs: 50,
            seed: 17,
        }
    }
}

pub(crate) fn unit(v: &[f32]) -> Vec<f64> {
    let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        x
    } else {
        x.into_iter().map(|a| a / n).collect()
    }
}

/// Exemplar SVM: `positive` is the only +1 example, `negatives` are -1.
///
/// Minimizes `lambda/2 |w|^2 + mean_i s_i hinge_i` with `lambda = 1 / (c n)`
/// by stochastic subgradient steps of size `1 / (lambda t)`, visiting the
/// examples in a seeded shuffle each epoch. Class weights `s_i` balance the
/// single positive against the negatives; the bias is learned as the weight
/// of a constant feature.
pub fn train_exemplar_svm(positive: &[f64], negatives: &[Vec<f64>], params: &SvmParams) -> SvmModel {
    let d = positive.len();
    let n = negatives.len() + 1;
    let lambda = 1.0 / (params.c * n as f64);
    let pos_weight = n as f64 / 2.0;
    let neg_weight = if negatives.is_empty() {
        0.0
    } else {
        n as f64 / (2.0 * negatives.len() as f64)
    };
    let mut w = vec![0.0f64; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut t = 0usize;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let (x, y, s) = if i == 0 {
                (positive, 1.0, pos_weight)
            } else {
                (negatives[i - 1].as_slice(), -1.0, neg_weight)
            };
            let eta = 1.0 / (lambda * t as f64);
            let margin = y * (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d]);
            let shrink = 1.0 - eta * lambda;
            for v in w.iter_mut() {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, a) in w.iter_mut().zip(x) {
                    *v += eta * s * y * a;
                }
                w[d] += eta * s * y;
            }
        }
    }
    let b = w.pop().unwrap_or(0.0);
    SvmModel {
        w,
        b,
        c: params.c,
        epochs: params.epochs,
    }
}

/// Candidates ordered by descending decision value of an exemplar SVM trained
/// on `q` against them, ties in block id order. Returns `(block_id, decision)`.
pub fn svm_rerank(
    index: &EmbeddingIndex,
    q: &[f32],
    candidates: &[String],
    params: &SvmParams,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::EmptyCandidates);
    }
    if q.len() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim,
            found: q.len(),
        });
    }
    let rows = candidates
        .iter()
        .map(|id| {
            index
                .position(id)
                .map(|i| unit(index.row(i)))
                .ok_or_else(|| RetrievalError::UnknownBlock(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = train_exemplar_svm(&unit(q), &rows, params);
    let mut ranked: Vec<(String, f64)> = candidates
        .iter()
        .cloned()
        .zip(rows.iter().map(|x| model.decision(x)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}
