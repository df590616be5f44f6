//! Decoder-only transformer: pre-norm blocks with causal multi-head attention
//! and a GELU MLP, learned absolute positions and an untied output head.
//!
//! Parameters are stored as `f32`; every pass widens them to `f64` and runs all
//! arithmetic (including reductions) in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, dot};
use super::{ModelConfig, ModelError, ParamSet, Tensor, TokenId, Tokenizer, TrainBatch};
use crate::digest::derive_seed;

pub const INIT_STD: f64 = 0.02;

/// Per-layer parameter suffixes, in the order they are resolved.
const LAYER_PARAMS: [&str; 16] = [
    "ln1.g",
    "ln1.b",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.g",
    "ln2.b",
    "mlp.fc.w",
    "mlp.fc.b",
    "mlp.proj.w",
    "mlp.proj.b",
];

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("h{layer}.{suffix}")
}

pub fn lora_a_name(target: &str) -> String {
    format!("{target}.lora_a")
}

pub fn lora_b_name(target: &str) -> String {
    format!("{target}.lora_b")
}

pub fn prefix_k_name(layer: usize) -> String {
    layer_param(layer, "prefix.k")
}

pub fn prefix_v_name(layer: usize) -> String {
    layer_param(layer, "prefix.v")
}

fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v, c) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.context_len);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c, d]),
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("lm_head".to_string(), vec![v, d]),
    ];
    for l in 0..cfg.n_layers {
        for suffix in LAYER_PARAMS {
            let shape = match suffix {
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                "mlp.fc.w" => vec![f, d],
                "mlp.fc.b" => vec![f],
                "mlp.proj.w" => vec![d, f],
                _ => vec![d],
            };
            out.push((layer_param(l, suffix), shape));
        }
    }
    out
}

/// Seeded Gaussian sample tensor; the stream depends only on `seed` and `label`.
pub(crate) fn gaussian(seed: u64, label: &str, shape: Vec<usize>, std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(&mut rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Fresh base-model parameters: N(0, 0.02) weights, unit norm gains, zero biases.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in base_shapes(cfg) {
        let t = if name.ends_with(".g") {
            Tensor::filled(shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            gaussian(cfg.seed, &name, shape, INIT_STD)
        };
        params.insert(name, t, true);
    }
    Ok(params)
}

/// Model weights widened to f64, LoRA already folded into effective matrices.
#[derive(Clone)]
struct Net {
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    lm_head: Vec<f64>,
    layers: Vec<Layer>,
}

#[derive(Clone, Default)]
struct Layer {
    p: Vec<Vec<f64>>, // indexed like LAYER_PARAMS
    prefix_k: Vec<f64>,
    prefix_v: Vec<f64>,
}

// indices into Layer::p
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const FC_W: usize = 12;
const FC_B: usize = 13;
const PROJ_W: usize = 14;
const PROJ_B: usize = 15;

impl Net {
    fn build(params: &ParamSet, cfg: &ModelConfig) -> Result<Net, ModelError> {
        cfg.validate()?;
        let mut net = Net {
            tok_emb: Vec::new(),
            pos_emb: Vec::new(),
            lnf_g: Vec::new(),
            lnf_b: Vec::new(),
            lm_head: Vec::new(),
            layers: vec![Layer::default(); cfg.n_layers],
        };
        let shapes: std::collections::BTreeMap<String, Vec<usize>> = base_shapes(cfg).into_iter().collect();
        let mut slots = net.named_mut(cfg);
        for (name, slot) in slots.iter_mut() {
            let t = params.tensor(name)?;
            let expected = shapes
                .get(name.as_str())
                .cloned()
                .unwrap_or_else(|| vec![cfg.adapters.prefix_len, cfg.d_model]);
            if t.shape() != expected.as_slice() {
                return Err(ModelError::ShapeMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    expected
                )));
            }
            **slot = effective_weight(params, cfg, name, t)?;
        }
        Ok(net)
    }

    fn zeros_like(&self) -> Net {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Net {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
            lm_head: z(&self.lm_head),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    p: l.p.iter().map(z).collect(),
                    prefix_k: z(&l.prefix_k),
                    prefix_v: z(&l.prefix_v),
                })
                .collect(),
        }
    }

    fn named_mut(&mut self, cfg: &ModelConfig) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("ln_f.g".into(), &mut self.lnf_g),
            ("ln_f.b".into(), &mut self.lnf_b),
            ("lm_head".into(), &mut self.lm_head),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if layer.p.is_empty() {
                layer.p = vec![Vec::new(); LAYER_PARAMS.len()];
            }
            for (suffix, slot) in LAYER_PARAMS.iter().zip(layer.p.iter_mut()) {
                out.push((layer_param(l, suffix), slot));
            }
            if cfg.adapters.prefix_len > 0 {
                out.push((prefix_k_name(l), &mut layer.prefix_k));
                out.push((prefix_v_name(l), &mut layer.prefix_v));
            }
        }
        out
    }
}

/// `W + (alpha / r) · B · A` when a LoRA adapter targets `name`, else `W`.
fn effective_weight(params: &ParamSet, cfg: &ModelConfig, name: &str, base: &Tensor) -> Result<Vec<f64>, ModelError> {
    let mut w = base.to_f64();
    if let Some(spec) = cfg.adapters.lora.get(name) {
        let (d_out, d_in) = matrix_dims(name, base)?;
        let a = params.tensor(&lora_a_name(name))?;
        let b = params.tensor(&lora_b_name(name))?;
        if a.shape() != [spec.rank, d_in] || b.shape() != [d_out, spec.rank] {
            return Err(ModelError::ShapeMismatch(format!("lora factors for `{name}`")));
        }
        let ba = ops::matmul(&b.to_f64(), &a.to_f64(), d_out, spec.rank, d_in);
        let s = spec.scale();
        for (wi, di) in w.iter_mut().zip(&ba) {
            *wi += s * di;
        }
    }
    Ok(w)
}

fn matrix_dims(name: &str, t: &Tensor) -> Result<(usize, usize), ModelError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(ModelError::ShapeMismatch(format!("`{name}` is not a matrix"))),
    }
}

struct LayerCache {
    a: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k_full: Vec<f64>,
    v_full: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    m: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

struct SeqCache {
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hidden: Vec<f64>,
}

fn check_ids(ids: &[TokenId], cfg: &ModelConfig) -> Result<(), ModelError> {
    if ids.len() > cfg.context_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max: cfg.context_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Runs one sequence through the blocks; returns final hidden states (after the
/// output norm) and, when requested, everything needed for backward.
fn run_sequence(net: &Net, cfg: &ModelConfig, ids: &[TokenId], keep: bool) -> (Vec<f64>, Option<SeqCache>) {
    let d = cfg.d_model;
    let t_len = ids.len();
    let p_len = cfg.adapters.prefix_len;
    let s_len = p_len + t_len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t_len * d];
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        let tok = &net.tok_emb[id as usize * d..(id as usize + 1) * d];
        let pos = &net.pos_emb[t * d..(t + 1) * d];
        for i in 0..d {
            row[i] = tok[i] + pos[i];
        }
    }

    let mut caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
    for layer in &net.layers {
        let w = &layer.p;
        let (a, ln1_xhat, ln1_rstd) = ops::layer_norm(&x, d, &w[LN1_G], &w[LN1_B]);
        let q = ops::linear(&a, t_len, &w[WQ], Some(&w[BQ]), d);
        let k = ops::linear(&a, t_len, &w[WK], Some(&w[BK]), d);
        let v = ops::linear(&a, t_len, &w[WV], Some(&w[BV]), d);
        let mut k_full = Vec::with_capacity(s_len * d);
        k_full.extend_from_slice(&layer.prefix_k);
        k_full.extend_from_slice(&k);
        let mut v_full = Vec::with_capacity(s_len * d);
        v_full.extend_from_slice(&layer.prefix_v);
        v_full.extend_from_slice(&v);

        let mut probs = vec![0.0; heads * t_len * s_len];
        let mut attn = vec![0.0; t_len * d];
        let mut scores = vec![0.0; s_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let n_keys = p_len + t + 1;
                let qt = &q[t * d + off..t * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n_keys {
                    let s = dot(qt, &k_full[j * d + off..j * d + off + hd]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(n_keys) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t_len + t) * s_len..(h * t_len + t + 1) * s_len];
                let out = &mut attn[t * d + off..t * d + off + hd];
                for j in 0..n_keys {
                    let p = scores[j] / z;
                    prow[j] = p;
                    ops::axpy(p, &v_full[j * d + off..j * d + off + hd], out);
                }
            }
        }
        let o = ops::linear(&attn, t_len, &w[WO], Some(&w[BO]), d);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let (m, ln2_xhat, ln2_rstd) = ops::layer_norm(&x, d, &w[LN2_G], &w[LN2_B]);
        let f = ops::linear(&m, t_len, &w[FC_W], Some(&w[FC_B]), cfg.d_ff);
        let g: Vec<f64> = f.iter().map(|&v| ops::gelu(v)).collect();
        let y = ops::linear(&g, t_len, &w[PROJ_W], Some(&w[PROJ_B]), d);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += yi;
        }
        if keep {
            caches.push(LayerCache {
                a,
                ln1_xhat,
                ln1_rstd,
                q,
                k_full,
                v_full,
                probs,
                attn,
                m,
                ln2_xhat,
                ln2_rstd,
                f,
                g,
            });
        }
    }
    let (hidden, lnf_xhat, lnf_rstd) = ops::layer_norm(&x, d, &net.lnf_g, &net.lnf_b);
    let cache = keep.then(|| SeqCache {
        layers: caches,
        lnf_xhat,
        lnf_rstd,
        hidden: hidden.clone(),
    });
    (hidden, cache)
}

/// Keys and values of the tokens seen so far, per layer, prefix rows first.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    fn new(net: &Net, cfg: &ModelConfig) -> Self {
        let cap = (cfg.adapters.prefix_len + cfg.context_len) * cfg.d_model;
        let start = |p: &Vec<f64>| {
            let mut v = Vec::with_capacity(cap);
            v.extend_from_slice(p);
            v
        };
        Self {
            k: net.layers.iter().map(|l| start(&l.prefix_k)).collect(),
            v: net.layers.iter().map(|l| start(&l.prefix_v)).collect(),
            len: 0,
        }
    }

    /// Appends one token at the next position and returns its final hidden
    /// state. Matches the corresponding row of [`run_sequence`] bitwise.
    fn step(&mut self, net: &Net, cfg: &ModelConfig, id: TokenId) -> Vec<f64> {
        let d = cfg.d_model;
        let t = self.len;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n_keys = cfg.adapters.prefix_len + t + 1;
        let tok = &net.tok_emb[id as usize * d..(id as usize + 1) * d];
        let pos = &net.pos_emb[t * d..(t + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut scores = vec![0.0; n_keys];
        for (l, layer) in net.layers.iter().enumerate() {
            let w = &layer.p;
            let (a, _, _) = ops::layer_norm(&x, d, &w[LN1_G], &w[LN1_B]);
            let q = ops::linear(&a, 1, &w[WQ], Some(&w[BQ]), d);
            self.k[l].extend(ops::linear(&a, 1, &w[WK], Some(&w[BK]), d));
            self.v[l].extend(ops::linear(&a, 1, &w[WV], Some(&w[BV]), d));
            let (k_full, v_full) = (&self.k[l], &self.v[l]);
            let mut attn = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let off = h * hd;
                let qt = &q[off..off + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n_keys {
                    let s = dot(qt, &k_full[j * d + off..j * d + off + hd]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut attn[off..off + hd];
                for j in 0..n_keys {
                    ops::axpy(scores[j] / z, &v_full[j * d + off..j * d + off + hd], out);
                }
            }
            let o = ops::linear(&attn, 1, &w[WO], Some(&w[BO]), d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let (m, _, _) = ops::layer_norm(&x, d, &w[LN2_G], &w[LN2_B]);
            let f = ops::linear(&m, 1, &w[FC_W], Some(&w[FC_B]), cfg.d_ff);
            let g: Vec<f64> = f.iter().map(|&v| ops::gelu(v)).collect();
            let y = ops::linear(&g, 1, &w[PROJ_W], Some(&w[PROJ_B]), d);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
        }
        self.len += 1;
        ops::layer_norm(&x, d, &net.lnf_g, &net.lnf_b).0
    }
}

fn logits_for(net: &Net, cfg: &ModelConfig, hidden: &[f64], rows: usize) -> Vec<f64> {
    ops::linear(hidden, rows, &net.lm_head, None, cfg.vocab_size)
}

fn backward_sequence(
    net: &Net,
    cfg: &ModelConfig,
    ids: &[TokenId],
    cache: &SeqCache,
    dlogits: &[f64],
    grads: &mut Net,
) {
    let d = cfg.d_model;
    let t_len = ids.len();
    let p_len = cfg.adapters.prefix_len;
    let s_len = p_len + t_len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let dh = ops::linear_backward(dlogits, &cache.hidden, t_len, &net.lm_head, &mut grads.lm_head, None);
    let mut dx = ops::layer_norm_backward(
        &dh,
        &cache.lnf_xhat,
        &cache.lnf_rstd,
        d,
        &net.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for (li, layer) in net.layers.iter().enumerate().rev() {
        let w = &layer.p;
        let c = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // MLP branch
        let (dproj_w, rest) = gl.p.split_at_mut(PROJ_B);
        let dg = ops::linear_backward(&dx, &c.g, t_len, &w[PROJ_W], &mut dproj_w[PROJ_W], Some(&mut rest[0]));
        let df: Vec<f64> = dg.iter().zip(&c.f).map(|(g, f)| g * ops::gelu_grad(*f)).collect();
        let (lo, hi) = gl.p.split_at_mut(FC_B);
        let dm = ops::linear_backward(&df, &c.m, t_len, &w[FC_W], &mut lo[FC_W], Some(&mut hi[0]));
        let (lo, hi) = gl.p.split_at_mut(LN2_B);
        let dmid = ops::layer_norm_backward(&dm, &c.ln2_xhat, &c.ln2_rstd, d, &w[LN2_G], &mut lo[LN2_G], &mut hi[0]);
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }

        // attention branch
        let (lo, hi) = gl.p.split_at_mut(BO);
        let dattn = ops::linear_backward(&dx, &c.attn, t_len, &w[WO], &mut lo[WO], Some(&mut hi[0]));
        let mut dq = vec![0.0; t_len * d];
        let mut dk_full = vec![0.0; s_len * d];
        let mut dv_full = vec![0.0; s_len * d];
        let mut dp = vec![0.0; s_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let n_keys = p_len + t + 1;
                let prow = &c.probs[(h * t_len + t) * s_len..(h * t_len + t + 1) * s_len];
                let dout = &dattn[t * d + off..t * d + off + hd];
                let mut weighted = 0.0;
                for j in 0..n_keys {
                    dp[j] = dot(dout, &c.v_full[j * d + off..j * d + off + hd]);
                    weighted += prow[j] * dp[j];
                    ops::axpy(prow[j], dout, &mut dv_full[j * d + off..j * d + off + hd]);
                }
                let qt = &c.q[t * d + off..t * d + off + hd];
                for j in 0..n_keys {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    ops::axpy(
                        ds,
                        &c.k_full[j * d + off..j * d + off + hd],
                        &mut dq[t * d + off..t * d + off + hd],
                    );
                    ops::axpy(ds, qt, &mut dk_full[j * d + off..j * d + off + hd]);
                }
            }
        }
        if p_len > 0 {
            for (g, v) in gl.prefix_k.iter_mut().zip(&dk_full[..p_len * d]) {
                *g += v;
            }
            for (g, v) in gl.prefix_v.iter_mut().zip(&dv_full[..p_len * d]) {
                *g += v;
            }
        }
        let dk = &dk_full[p_len * d..];
        let dv = &dv_full[p_len * d..];
        let (lo, hi) = gl.p.split_at_mut(BQ);
        let mut da = ops::linear_backward(&dq, &c.a, t_len, &w[WQ], &mut lo[WQ], Some(&mut hi[0]));
        let (lo, hi) = gl.p.split_at_mut(BK);
        let dak = ops::linear_backward(dk, &c.a, t_len, &w[WK], &mut lo[WK], Some(&mut hi[0]));
        let (lo, hi) = gl.p.split_at_mut(BV);
        let dav = ops::linear_backward(dv, &c.a, t_len, &w[WV], &mut lo[WV], Some(&mut hi[0]));
        for i in 0..da.len() {
            da[i] += dak[i] + dav[i];
        }
        let (lo, hi) = gl.p.split_at_mut(LN1_B);
        let din = ops::layer_norm_backward(&da, &c.ln1_xhat, &c.ln1_rstd, d, &w[LN1_G], &mut lo[LN1_G], &mut hi[0]);
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
    }

    for (t, &id) in ids.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        ops::axpy(1.0, row, &mut grads.tok_emb[id as usize * d..(id as usize + 1) * d]);
        ops::axpy(1.0, row, &mut grads.pos_emb[t * d..(t + 1) * d]);
    }
}

/// Per-position `-log softmax(row)[target]`, handling infinite logits.
pub(crate) fn nll(row: &[f64], target: usize) -> f64 {
    let tv = row[target];
    if tv == f64::INFINITY {
        let infs = row.iter().filter(|v| **v == f64::INFINITY).count();
        return (infs as f64).ln();
    }
    ops::log_sum_exp(row) - tv
}

fn check_batch(batch: &TrainBatch, cfg: &ModelConfig) -> Result<(), ModelError> {
    batch.validate()?;
    for row in 0..batch.batch {
        check_ids(batch.input_row(row), cfg)?;
        if let Some(&id) = batch.target_row(row).iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    if batch.masked_count() == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(())
}

/// Logits for a batch of equal-length token rows, shape `batch × T × vocab`.
pub fn forward(params: &ParamSet, cfg: &ModelConfig, inputs: &[Vec<TokenId>]) -> Result<Tensor, ModelError> {
    let t_len = inputs.first().map_or(0, Vec::len);
    if inputs.iter().any(|r| r.len() != t_len) {
        return Err(ModelError::ShapeMismatch("input rows differ in length".into()));
    }
    for row in inputs {
        check_ids(row, cfg)?;
    }
    let net = Net::build(params, cfg)?;
    let mut out = Vec::with_capacity(inputs.len() * t_len * cfg.vocab_size);
    for row in inputs {
        let (hidden, _) = run_sequence(&net, cfg, row, false);
        out.extend(logits_for(&net, cfg, &hidden, t_len).into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![inputs.len(), t_len, cfg.vocab_size], out)
}

/// Mean masked cross-entropy (nats) of precomputed logits.
pub fn loss(logits: &Tensor, batch: &TrainBatch) -> Result<f64, ModelError> {
    batch.validate()?;
    let [b, t, v] = logits.shape() else {
        return Err(ModelError::ShapeMismatch("logits must be rank 3".into()));
    };
    if *b != batch.batch || *t != batch.seq_len {
        return Err(ModelError::ShapeMismatch(format!(
            "logits {b}x{t} vs batch {}x{}",
            batch.batch, batch.seq_len
        )));
    }
    let n = batch.masked_count();
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    let mut total = 0.0;
    let mut row = vec![0.0; *v];
    for (pos, (&target, &on)) in batch.targets.iter().zip(&batch.loss_mask).enumerate() {
        if !on {
            continue;
        }
        if target as usize >= *v {
            return Err(ModelError::IdOutOfRange { id: target, vocab: *v });
        }
        for (dst, src) in row.iter_mut().zip(&logits.data()[pos * v..(pos + 1) * v]) {
            *dst = *src as f64;
        }
        total += nll(&row, target as usize);
    }
    Ok(total / n as f64)
}

/// Loss computed end to end in f64 (no intermediate f32 rounding of logits).
pub fn loss_value(params: &ParamSet, cfg: &ModelConfig, batch: &TrainBatch) -> Result<f64, ModelError> {
    check_batch(batch, cfg)?;
    let net = Net::build(params, cfg)?;
    let n = batch.masked_count() as f64;
    let v = cfg.vocab_size;
    let mut total = 0.0;
    for r in 0..batch.batch {
        let ids = batch.input_row(r);
        let (hidden, _) = run_sequence(&net, cfg, ids, false);
        let logits = logits_for(&net, cfg, &hidden, ids.len());
        for (t, (&target, &on)) in batch.target_row(r).iter().zip(batch.mask_row(r)).enumerate() {
            if on {
                total += nll(&logits[t * v..(t + 1) * v], target as usize);
            }
        }
    }
    Ok(total / n)
}

/// Loss and gradient with respect to every parameter; frozen entries get zeros.
pub fn value_and_grad(params: &ParamSet, cfg: &ModelConfig, batch: &TrainBatch) -> Result<(f64, ParamSet), ModelError> {
    check_batch(batch, cfg)?;
    let net = Net::build(params, cfg)?;
    let mut grads = net.zeros_like();
    let n = batch.masked_count() as f64;
    let v = cfg.vocab_size;
    let mut total = 0.0;
    for r in 0..batch.batch {
        let ids = batch.input_row(r);
        let (hidden, cache) = run_sequence(&net, cfg, ids, true);
        let cache = cache.expect("cache requested");
        let mut dlogits = logits_for(&net, cfg, &hidden, ids.len());
        for (t, (&target, &on)) in batch.target_row(r).iter().zip(batch.mask_row(r)).enumerate() {
            let row = &mut dlogits[t * v..(t + 1) * v];
            if !on {
                row.fill(0.0);
                continue;
            }
            let lse = ops::log_sum_exp(row);
            total += lse - row[target as usize];
            for x in row.iter_mut() {
                *x = (*x - lse).exp() / n;
            }
            row[target as usize] -= 1.0 / n;
        }
        backward_sequence(&net, cfg, ids, &cache, &dlogits, &mut grads);
    }
    let out = export_grads(params, cfg, grads)?;
    Ok((total / n, out))
}

pub fn grad(params: &ParamSet, cfg: &ModelConfig, batch: &TrainBatch) -> Result<ParamSet, ModelError> {
    value_and_grad(params, cfg, batch).map(|(_, g)| g)
}

/// Maps effective-weight gradients back onto stored entries (base and LoRA factors).
fn export_grads(params: &ParamSet, cfg: &ModelConfig, mut grads: Net) -> Result<ParamSet, ModelError> {
    let mut out = params.zeros_like();
    for (name, g) in grads.named_mut(cfg) {
        if let Some(spec) = cfg.adapters.lora.get(&name) {
            let base = params.tensor(&name)?;
            let (d_out, d_in) = matrix_dims(&name, base)?;
            let a_name = lora_a_name(&name);
            let b_name = lora_b_name(&name);
            let a = params.tensor(&a_name)?.to_f64();
            let b = params.tensor(&b_name)?.to_f64();
            let s = spec.scale();
            let r = spec.rank;
            if params.is_trainable(&b_name) {
                // dB = s · dW · Aᵀ
                let at = ops::transpose(&a, r, d_in);
                let db = ops::matmul(g, &at, d_out, d_in, r);
                write_grad(&mut out, &b_name, db.iter().map(|v| v * s))?;
            }
            if params.is_trainable(&a_name) {
                // dA = s · Bᵀ · dW
                let bt = ops::transpose(&b, d_out, r);
                let da = ops::matmul(&bt, g, r, d_out, d_in);
                write_grad(&mut out, &a_name, da.iter().map(|v| v * s))?;
            }
        }
        if params.is_trainable(&name) {
            write_grad(&mut out, &name, g.iter().copied())?;
        }
    }
    Ok(out)
}

fn write_grad(out: &mut ParamSet, name: &str, values: impl Iterator<Item = f64>) -> Result<(), ModelError> {
    let t = out.tensor_mut(name)?;
    for (dst, v) in t.data_mut().iter_mut().zip(values) {
        *dst = v as f32;
    }
    Ok(())
}

/// `params - lr * grads` on trainable entries; frozen entries are copied.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f32) -> Result<ParamSet, ModelError> {
    params.ensure_aligned(grads)?;
    let mut out = params.clone();
    for ((_, p), (_, g)) in out.iter_mut().zip(grads.iter()) {
        if !p.trainable {
            continue;
        }
        for (w, dw) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
            *w -= lr * dw;
        }
    }
    Ok(out)
}

/// Final-layer hidden states (after the output norm), shape `T × d_model`.
pub fn hidden_states(params: &ParamSet, cfg: &ModelConfig, ids: &[TokenId]) -> Result<Tensor, ModelError> {
    check_ids(ids, cfg)?;
    let net = Net::build(params, cfg)?;
    let (hidden, _) = run_sequence(&net, cfg, ids, false);
    Tensor::from_f64(vec![ids.len(), cfg.d_model], &hidden)
}

/// Mean of final-layer hidden states over all byte positions. Texts longer than
/// the context are processed in consecutive context-sized windows.
pub fn embed_text(params: &ParamSet, cfg: &ModelConfig, text: &str) -> Result<Vec<f32>, ModelError> {
    if text.is_empty() {
        return Err(ModelError::EmptyText);
    }
    let net = Net::build(params, cfg)?;
    let ids = super::tokenize(text.as_bytes());
    let d = cfg.d_model;
    let mut sum = vec![0.0f64; d];
    for window in ids.chunks(cfg.context_len) {
        let (hidden, _) = run_sequence(&net, cfg, window, false);
        for row in hidden.chunks_exact(d) {
            ops::axpy(1.0, row, &mut sum);
        }
    }
    let n = ids.len() as f64;
    Ok(sum.iter().map(|v| (v / n) as f32).collect())
}

/// Decoding strategy for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Autoregressive continuation of `prompt`, at most `max_new` tokens, stopping at
/// any special token. Once the context is full the oldest tokens slide out.
pub fn generate(
    params: &ParamSet,
    cfg: &ModelConfig,
    prompt: &str,
    max_new: usize,
    mode: DecodeMode,
) -> Result<String, ModelError> {
    let mut ids = super::tokenize(prompt.as_bytes());
    check_ids(&ids, cfg)?;
    if max_new == 0 {
        return Ok(String::new());
    }
    let net = Net::build(params, cfg)?;
    let mut rng = match mode {
        DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut produced = Vec::new();
    let mut cache = KvCache::new(&net, cfg);
    let mut last = None;
    for &id in &ids {
        last = Some(cache.step(&net, cfg, id));
    }
    for _ in 0..max_new {
        let start = ids.len().saturating_sub(cfg.context_len);
        let window = &ids[start..];
        let next = if window.is_empty() {
            Tokenizer::EOS
        } else {
            let hidden = match last.take() {
                Some(h) => h,
                None => {
                    let (hidden, _) = run_sequence(&net, cfg, window, false);
                    hidden[(window.len() - 1) * cfg.d_model..].to_vec()
                }
            };
            let logits = logits_for(&net, cfg, &hidden, 1);
            match (mode, rng.as_mut()) {
                (DecodeMode::TopK { k, .. }, Some(rng)) => sample_top_k(&logits, k.max(1), rng),
                _ => argmax(&logits),
            }
        };
        if Tokenizer::is_special(next) {
            break;
        }
        produced.push(next);
        ids.push(next);
        // Once the window slides, positions shift and every step is recomputed.
        if ids.len() <= cfg.context_len {
            last = Some(cache.step(&net, cfg, next));
        }
    }
    Ok(String::from_utf8_lossy(&super::detokenize(&produced)).into_owned())
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut ChaCha8Rng) -> TokenId {
    use rand::Rng;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    order[order.len() - 1] as TokenId
}
