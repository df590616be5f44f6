//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Set `FEDCHAT_BLESS=1` to rewrite the golden training history.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Utc};
use fedchat_core::fedsim::{
    client_update, fedavg, quantize, quantize_tensor, run_round, ClientState, QuantBits, RoundConfig, RunConfig,
    RunHistory, TransportMode,
};
use fedchat_core::ingest::{
    block_id, load_corpus, load_documents, parse_blocks, persist_corpus, Corpus, QAPair, RawDocument,
};
use fedchat_core::metrics::{bleu, lcs_len, metric_tokens, rouge_l, rouge_n, RougeScore};
use fedchat_core::peft::{attach_lora, default_lora_targets, param_stats};
use fedchat_core::retrieval::{build_index, embed_text, nn_search, svm_rerank, EmbeddingIndex, Metric, SvmParams};
use fedchat_core::tinylm::{forward, grad, init_params, loss_value, ModelConfig, ParamSet, Tensor, TrainBatch};
use fedchat_service::{commands, router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn golden_history() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/history.csv")
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || {
        format!("{what} took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs())
    })
}

fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- gradient check ----

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        context_len: 16,
        seed: 21,
        ..ModelConfig::default()
    };
    ensure(cfg.vocab_size == 259, || format!("vocab {}", cfg.vocab_size))?;
    let params = init_params(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let seqs: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..9).map(|_| rng.random_range(0..259u32)).collect())
        .collect();
    let batch = TrainBatch::from_sequences(&seqs, 8).map_err(|e| e.to_string())?;
    let g = grad(&params, &cfg, &batch).map_err(|e| e.to_string())?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let h = 1e-3f32;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..params.tensor(name).unwrap().numel());
        let x = params.tensor(name).unwrap().data()[idx];
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.tensor_mut(name).unwrap().data_mut()[idx] = x + h;
        minus.tensor_mut(name).unwrap().data_mut()[idx] = x - h;
        let lp = loss_value(&plus, &cfg, &batch).map_err(|e| e.to_string())?;
        let lm = loss_value(&minus, &cfg, &batch).map_err(|e| e.to_string())?;
        let fd = (lp - lm) / ((x + h) as f64 - (x - h) as f64);
        let an = g.tensor(name).unwrap().data()[idx] as f64;
        let rel = (fd - an).abs() / an.abs().max(1e-8);
        ensure(rel < 1e-3, || {
            format!("coordinate {i} ({name}[{idx}]): fd {fd:e} vs analytic {an:e}, rel {rel:e}")
        })?;
        worst = worst.max(rel);
    }
    within(start, Duration::from_secs(60), "gradient check")?;
    Ok(format!("100 coordinates, worst relative error {worst:.2e}"))
}

// ---- metric oracles ----

const WORDS: [&str; 5] = ["x", "y", "z", "the", "dog"];

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    (0..rng.random_range(0..=max_len))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect()
}

/// Counts clipped n-gram matches by tallying every n-gram in both sequences.
fn counted_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[String]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if s.len() >= n {
            for w in s.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let (c, r) = (grams(cand), grams(reference));
    let hits = c.iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
    (hits, c.values().sum(), r.values().sum())
}

fn expected_rouge(hits: usize, c: usize, r: usize) -> RougeScore {
    if hits == 0 {
        return RougeScore::default();
    }
    let p = hits as f64 / c as f64;
    let rc = hits as f64 / r as f64;
    RougeScore {
        precision: p,
        recall: rc,
        f1: 2.0 * p * rc / (p + rc),
    }
}

fn lcs_rec(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs_rec(&a[1..], &b[1..], memo)
    } else {
        lcs_rec(&a[1..], b, memo).max(lcs_rec(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

fn bleu_of(c: &str, refs: &[&str], n: usize) -> f64 {
    let refs: Vec<Vec<String>> = refs.iter().map(|r| metric_tokens(r)).collect();
    bleu(&metric_tokens(c), &refs, n).score
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    for i in 0..500 {
        let c = random_tokens(&mut rng, 25);
        let r = random_tokens(&mut rng, 25);
        for n in 1..=2 {
            let (h, cn, rn) = counted_overlap(&c, &r, n);
            let got = rouge_n(&c, &r, n);
            ensure(got == expected_rouge(h, cn, rn), || {
                format!("rouge_{n} pair {i}: {c:?} / {r:?} gave {got:?}")
            })?;
        }
    }
    for i in 0..200 {
        let c = random_tokens(&mut rng, 20);
        let r = random_tokens(&mut rng, 20);
        let l = lcs_rec(&c, &r, &mut HashMap::new());
        ensure(lcs_len(&c, &r) == l, || format!("lcs pair {i}"))?;
        ensure(rouge_l(&c, &r) == expected_rouge(l, c.len(), r.len()), || {
            format!("rouge_l pair {i}")
        })?;
    }
    // Smoothed zero counts contribute 1/(c+1); brevity penalty exp(1 - r/c).
    let cases: [(f64, f64); 10] = [
        (bleu_of("one two three four", &["one two three four"], 4), 1.0),
        (bleu_of("go go go go", &["go home"], 4), (1.0f64 / 96.0).powf(0.25)),
        (bleu_of("red green blue", &["red green blue"], 4), 0.5f64.powf(0.25)),
        (bleu_of("p q", &["p q r s"], 4), (-1.0f64).exp() * 0.25f64.powf(0.25)),
        (bleu_of("a b c d e", &["a b c", "a b c d e f g"], 4), 1.0),
        (bleu_of("m n o p", &["a b c d"], 4), (1.0f64 / 120.0).powf(0.25)),
        (bleu_of("", &["a b"], 4), 0.0),
        (bleu_of("a b c d e f", &["a b c d x f"], 4), (1.0f64 / 12.0).powf(0.25)),
        (bleu_of("a a b", &["a b b"], 2), (1.0f64 / 3.0).sqrt()),
        (bleu_of("k l", &["k l"], 1), 1.0),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        ensure((got - want).abs() < 1e-9, || format!("bleu case {i}: {got} vs {want}"))?;
    }
    within(start, Duration::from_secs(10), "metric oracles")?;
    Ok("500 rouge_n pairs, 200 rouge_l pairs, 10 bleu cases".into())
}

// ---- fedavg algebra ----

fn random_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for i in 0..rng.random_range(1..6) {
        let shape = vec![rng.random_range(1..6), rng.random_range(1..9)];
        let n = shape[0] * shape[1];
        let data = (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        p.insert(format!("w{i}"), Tensor::new(shape, data).unwrap(), rng.random_bool(0.5));
    }
    p
}

fn jitter(p: &ParamSet, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut out = p.clone();
    for (_, param) in out.iter_mut() {
        for v in param.tensor.data_mut() {
            *v += rng.random_range(-0.5f32..0.5);
        }
    }
    out
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        context_len: 16,
        seed: 9,
        ..ModelConfig::default()
    }
}

fn texts() -> Vec<String> {
    [
        "the harbour fills with boats at dawn",
        "a clock ticks louder in an empty room",
        "bees carry pollen between the orchard trees",
        "the server averages what the clients send",
        "snow settles on the roofs without a sound",
        "a recipe lists the flour before the eggs",
        "old maps show rivers that have since moved",
        "the kettle whistles when the water boils",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| format!("{t}; line {i} repeats {t}."))
    .collect()
}

fn make_clients(n: usize, seed: u64) -> Vec<ClientState> {
    let d = texts();
    (0..n)
        .map(|k| {
            let shard: Vec<&String> = d.iter().skip(k).step_by(n).collect();
            ClientState::new(k + 1, &shard, 2, 12, seed + k as u64)
        })
        .collect()
}

fn fedavg_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for t in 0..50 {
        let p = random_params(&mut rng);
        let k = rng.random_range(2..8);
        let copies: Vec<(usize, ParamSet)> = (0..k).map(|i| (i + 1, p.clone())).collect();
        let avg = fedavg(&copies).map_err(|e| e.to_string())?;
        ensure(avg.bitwise_eq(&p), || {
            format!("set {t}: identical clients changed the model")
        })?;
        let single = fedavg(&[(1, p.clone())]).map_err(|e| e.to_string())?;
        ensure(single.bitwise_eq(&p), || {
            format!("set {t}: single-client average differs")
        })?;

        let mut varied: Vec<(usize, ParamSet)> = (0..k).map(|i| (i + 1, jitter(&p, &mut rng))).collect();
        let reference = fedavg(&varied).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            for i in (1..varied.len()).rev() {
                varied.swap(i, rng.random_range(0..=i));
            }
            let again = fedavg(&varied).map_err(|e| e.to_string())?;
            ensure(again.bitwise_eq(&reference), || {
                format!("set {t}: permutation changed the average")
            })?;
        }
    }
    let cfg = tiny_model();
    let global = init_params(&cfg).map_err(|e| e.to_string())?;
    let rc = RoundConfig {
        num_clients: 1,
        local_steps: 3,
        lr: 0.1,
        rounds: 1,
        ..RoundConfig::default()
    };
    let fed = run_round(&global, &mut make_clients(1, 60), &cfg, &rc, 0.0, 1).map_err(|e| e.to_string())?;
    let central =
        client_update(&global, &mut make_clients(1, 60)[0], &cfg, rc.lr, rc.local_steps).map_err(|e| e.to_string())?;
    ensure(fed.global.bitwise_eq(&central), || {
        "one-client round differs from centralized training".into()
    })?;
    within(start, Duration::from_secs(5), "fedavg algebra")?;
    Ok("50 random parameter sets, one-client round equals centralized".into())
}

// ---- transport ----

fn lora_start(cfg: &ModelConfig) -> Result<(ParamSet, ModelConfig), String> {
    let base = init_params(cfg).map_err(|e| e.to_string())?;
    attach_lora(&base, cfg, &default_lora_targets(cfg), 2, 4.0).map_err(|e| e.to_string())
}

fn round_cfg(mode: TransportMode, quant: QuantBits) -> RoundConfig {
    RoundConfig {
        num_clients: 4,
        local_steps: 2,
        lr: 0.2,
        transport_mode: mode,
        quant_bits: quant,
        rounds: 3,
        eval_every: 1,
    }
}

fn seeded_run(mode: TransportMode) -> Result<(ParamSet, Vec<usize>), String> {
    let (mut global, acfg) = lora_start(&tiny_model())?;
    let mut cs = make_clients(4, 700);
    let rc = round_cfg(mode, QuantBits::None);
    let mut uplink = Vec::new();
    for round in 1..=3 {
        let out = run_round(&global, &mut cs, &acfg, &rc, 0.0, round).map_err(|e| e.to_string())?;
        uplink.push(out.record.uplink_total());
        global = out.global;
    }
    Ok((global, uplink))
}

fn lossless_transport() -> Outcome {
    let (full, up_full) = seeded_run(TransportMode::Full)?;
    let (diff, up_diff) = seeded_run(TransportMode::Diff)?;
    let (adapters, up_adapters) = seeded_run(TransportMode::AdaptersOnly)?;
    ensure(full.bitwise_eq(&diff), || {
        "diff transport changed the global model".into()
    })?;
    ensure(full.bitwise_eq(&adapters), || {
        "adapters-only transport changed the global model".into()
    })?;
    let expected = param_stats(&full).trainable_percent;
    let mut worst = 0.0f64;
    for r in 0..3 {
        ensure(up_diff[r] < up_full[r], || {
            format!("round {}: diff {} >= full {}", r + 1, up_diff[r], up_full[r])
        })?;
        let ratio = 100.0 * up_adapters[r] as f64 / up_full[r] as f64;
        worst = worst.max((ratio - expected).abs());
        ensure((ratio - expected).abs() <= 1.0, || {
            format!("round {}: ratio {ratio:.3}% vs {expected:.3}%", r + 1)
        })?;
    }
    Ok(format!(
        "bitwise equal over 3 rounds; uplink full {} diff {} adapters {}; ratio gap {worst:.3} points",
        up_full.iter().sum::<usize>(),
        up_diff.iter().sum::<usize>(),
        up_adapters.iter().sum::<usize>()
    ))
}

// ---- quantization ----

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..100 {
        let n = rng.random_range(1..500);
        let spread = 10f32.powi(rng.random_range(-3..3));
        let offset = rng.random_range(-3.0f32..3.0) * spread;
        let data: Vec<f32> = (0..n)
            .map(|_| offset + rng.random_range(-1.0f32..1.0) * spread)
            .collect();
        let t = Tensor::new(vec![n], data).unwrap();
        let q = quantize_tensor(&t, true, "t").map_err(|e| e.to_string())?;
        let back = q.dequantize();
        let bound = q.scale as f64 / 2.0;
        for (a, b) in t.data().iter().zip(back.data()) {
            let err = (*a as f64 - *b as f64).abs();
            ensure(err <= bound, || format!("tensor {case}: error {err:e} above {bound:e}"))?;
        }
    }
    let (global, acfg) = lora_start(&tiny_model())?;
    let mut report = Vec::new();
    for mode in [TransportMode::Full, TransportMode::AdaptersOnly] {
        let exact = run_round(
            &global,
            &mut make_clients(4, 900),
            &acfg,
            &round_cfg(mode, QuantBits::None),
            0.0,
            1,
        )
        .map_err(|e| e.to_string())?;
        let quant = run_round(
            &global,
            &mut make_clients(4, 900),
            &acfg,
            &round_cfg(mode, QuantBits::Bits(8)),
            0.0,
            1,
        )
        .map_err(|e| e.to_string())?;
        let mut bound = 0.0f64;
        for (_, local) in &exact.client_params {
            let sent = if mode == TransportMode::Full {
                local.clone()
            } else {
                local.trainable_subset()
            };
            bound = bound.max(quantize(&sent, 8).map_err(|e| e.to_string())?.max_half_step());
        }
        let dev = quant.global.max_abs_diff(&exact.global).map_err(|e| e.to_string())?;
        ensure(dev <= bound, || format!("{mode}: deviation {dev:e} above {bound:e}"))?;
        report.push(format!("{mode} deviation {dev:.2e} <= {bound:.2e}"));
    }
    Ok(format!("100 tensors within scale/2; {}", report.join(", ")))
}

// ---- training progress ----

fn training_progress(workdir: &Path) -> Result<(String, PathBuf), String> {
    let start = Instant::now();
    let run = RunConfig::default();
    ensure(
        run.round.num_clients == 4 && run.lora_rank == 4 && run.round.rounds == 5 && run.round.local_steps == 20,
        || "default run settings changed".into(),
    )?;
    let config = ServiceConfig::default();
    let texts = commands::training_texts(&config, Some(&data_dir().join("seed"))).map_err(|e| e.to_string())?;
    let model_out = workdir.join("model.tlm");
    let history_out = workdir.join("history.csv");
    let out = commands::train(&run, &texts, &model_out, &history_out, |_| {}).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(600), "training run")?;
    let losses: Vec<f64> = (0..=5)
        .map(|r| {
            out.history
                .global_loss(r)
                .ok_or_else(|| format!("no global loss for round {r}"))
        })
        .collect::<Result<_, _>>()?;
    ensure(losses[5] < losses[0], || format!("loss did not drop: {losses:?}"))?;
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    ensure(drops >= 4, || {
        format!("loss fell in only {drops} of 5 rounds: {losses:?}")
    })?;
    let csv = std::fs::read(&history_out).map_err(|e| e.to_string())?;
    let golden = golden_history();
    if std::env::var_os("FEDCHAT_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&golden, &csv).map_err(|e| e.to_string())?;
    }
    let expected = std::fs::read(&golden).map_err(|e| format!("reading {}: {e}", golden.display()))?;
    ensure(csv == expected, || "history CSV differs from the golden file".into())?;
    RunHistory::from_csv(&String::from_utf8_lossy(&csv)).map_err(|e| e.to_string())?;
    let trace: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    Ok((
        format!("global loss {}; {drops}/5 drops; golden match", trace.join(" > ")),
        model_out,
    ))
}

// ---- lora zero init ----

fn lora_zero_init() -> Outcome {
    let cfg = ModelConfig {
        context_len: 48,
        seed: 44,
        ..ModelConfig::default()
    };
    let base = init_params(&cfg).map_err(|e| e.to_string())?;
    let (adapted, acfg) = attach_lora(&base, &cfg, &default_lora_targets(&cfg), 4, 8.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..20 {
        let len = rng.random_range(1..=cfg.context_len);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..259)).collect();
        let a = forward(&base, &cfg, std::slice::from_ref(&ids)).map_err(|e| e.to_string())?;
        let b = forward(&adapted, &acfg, &[ids]).map_err(|e| e.to_string())?;
        ensure(bits_eq(&a, &b), || {
            format!("input {i} differs after attaching adapters")
        })?;
    }
    Ok("20 inputs bitwise equal".into())
}

// ---- retrieval ----

fn scan(index: &EmbeddingIndex, q: &[f32], k: usize) -> Vec<String> {
    let score = |i: usize| -> f64 {
        let row = index.row(i);
        match index.metric {
            Metric::Cosine => {
                let dot: f64 = row.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
                let na: f64 = row.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = q.iter().map(|b| (*b as f64).powi(2)).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
            Metric::Euclidean => -row
                .iter()
                .zip(q)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    };
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap()
            .then_with(|| index.block_ids[a].cmp(&index.block_ids[b]))
    });
    order.into_iter().take(k).map(|i| index.block_ids[i].clone()).collect()
}

fn kb_corpus() -> Result<Corpus, String> {
    let mut corpus = Corpus::default();
    corpus
        .add_documents(load_documents(&data_dir().join("kb")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok(corpus)
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    for t in 0..200 {
        let metric = if t % 2 == 0 { Metric::Cosine } else { Metric::Euclidean };
        let n = rng.random_range(1..50);
        let d = rng.random_range(1..10);
        // Coarse values so exact ties occur.
        let v = (0..n * d).map(|_| rng.random_range(-4i32..=4) as f32 / 4.0).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("id{:03}", (i * 37) % 1000)).collect();
        let index = EmbeddingIndex::new(ids, d, v, metric, 0).map_err(|e| e.to_string())?;
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-4i32..=4) as f32 / 4.0).collect();
        let k = rng.random_range(1..n + 3);
        let got: Vec<String> = nn_search(&index, &q, k)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|r| r.block_id)
            .collect();
        ensure(got == scan(&index, &q, k), || {
            format!("instance {t} differs from the scan")
        })?;
    }

    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        context_len: 64,
        seed: 8,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg).map_err(|e| e.to_string())?;
    let corpus = kb_corpus()?;
    let index = build_index(&corpus, &params, &cfg, Metric::Cosine).map_err(|e| e.to_string())?;
    let mut self_hits = 0;
    for b in corpus.blocks.iter().take(50) {
        let q = embed_text(&params, &cfg, &b.text).map_err(|e| e.to_string())?;
        if nn_search(&index, &q, 1).map_err(|e| e.to_string())?[0].block_id == b.block_id {
            self_hits += 1;
        }
    }
    ensure(self_hits == 50, || format!("self-retrieval {self_hits}/50"))?;

    let d = 16;
    let ids: Vec<String> = (0..20).map(|i| format!("v{i:02}")).collect();
    let mut planted_hits = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut v: Vec<f32> = (0..20 * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let planted = rng.random_range(0..20);
        for j in 0..d {
            v[planted * d + j] = q[j] + rng.random_range(-0.05f32..0.05);
        }
        let index = EmbeddingIndex::new(ids.clone(), d, v, Metric::Cosine, 0).map_err(|e| e.to_string())?;
        let ranked = svm_rerank(&index, &q, &index.block_ids, &SvmParams::default()).map_err(|e| e.to_string())?;
        if ranked.iter().take(3).any(|(id, _)| *id == ids[planted]) {
            planted_hits += 1;
        }
    }
    ensure(planted_hits >= 90, || {
        format!("planted duplicate in top 3 only {planted_hits}/100")
    })?;
    Ok(format!(
        "200 scans equal; self-retrieval {self_hits}/50; planted duplicate {planted_hits}/100"
    ))
}

// ---- corpus roundtrip ----

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['b', 'd', 'i', 'l', 'n', 'u', 'ä', 'ø', 'λ', '9', '\'', '\t', '{'];
    (0..rng.random_range(1..9))
        .map(|_| CHARS[rng.random_range(0..CHARS.len())])
        .collect()
}

fn random_corpus(rng: &mut ChaCha8Rng, target: usize) -> Result<Corpus, String> {
    let mut corpus = Corpus::default();
    while corpus.blocks.len() < target {
        let paras = rng.random_range(1..5).min(target - corpus.blocks.len());
        let body: Vec<String> = (0..paras)
            .map(|_| {
                (0..rng.random_range(1..12))
                    .map(|_| random_word(rng))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let time: DateTime<Utc> =
            DateTime::from_timestamp(rng.random_range(0..1_900_000_000), rng.random_range(0..1_000_000_000)).unwrap();
        let doc = RawDocument::new(
            format!("test://doc/{}", corpus.documents.len()),
            body.join("\n\n"),
            time,
        );
        corpus.add_documents(vec![doc]).map_err(|e| e.to_string())?;
    }
    corpus.qa = corpus
        .blocks
        .iter()
        .step_by(4)
        .map(|b| QAPair {
            question: format!("Tell me about {}", b.header),
            answer: b.text.clone(),
            block_id: b.block_id.clone(),
        })
        .collect();
    Ok(corpus)
}

fn corpus_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let corpus = random_corpus(&mut rng, 100)?;
    ensure(corpus.blocks.len() == 100, || format!("{} blocks", corpus.blocks.len()))?;
    persist_corpus(&corpus, dir.path()).map_err(|e| e.to_string())?;
    let back = load_corpus(dir.path()).map_err(|e| e.to_string())?;
    ensure(back == corpus, || "reloaded corpus differs".into())?;

    let mut docs = load_documents(&data_dir().join("kb")).map_err(|e| e.to_string())?;
    docs.extend(load_documents(&data_dir().join("seed")).map_err(|e| e.to_string())?);
    let mut ids = BTreeSet::new();
    let mut blocks = 0;
    for d in &docs {
        for b in parse_blocks(d) {
            let span = &d.text.as_bytes()[b.byte_span.0..b.byte_span.1];
            ensure(span == b.text.as_bytes(), || {
                format!("{}: span of block {} does not match", d.source_uri, b.seq)
            })?;
            ensure(b.block_id == block_id(&d.doc_id, b.seq, &b.text), || {
                format!("{}: id mismatch", d.source_uri)
            })?;
            ensure(ids.insert(b.block_id.clone()), || {
                format!("duplicate id {}", b.block_id)
            })?;
            blocks += 1;
        }
    }
    Ok(format!(
        "100-block corpus equal after reload; {blocks} fixture blocks, ids unique, spans exact"
    ))
}

// ---- service ----

async fn call(app: &Router, method: &str, uri: &str, body: Value) -> Result<(StatusCode, Value), String> {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .map_err(|e| e.to_string())?;
    let resp = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
    let v = serde_json::from_slice(&bytes).map_err(|e| format!("{status}: bad body {e}"))?;
    Ok((status, v))
}

const QUESTIONS: [(&str, &str); 6] = [
    ("How long does standard delivery take?", "Delivery times"),
    ("What are the password rules?", "Password rules"),
    ("How do I download an invoice?", "Downloading invoices"),
    ("How many days do I have to return an item?", "Return window"),
    ("What are the support hours?", "Support hours"),
    ("How do I invite team members?", "Inviting team members"),
];

fn service_end_to_end(model: Option<&Path>) -> Outcome {
    let model = model.ok_or("no trained model from the training criterion")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_dir = dir.path().join("store");
    persist_corpus(&kb_corpus()?, &corpus_dir).map_err(|e| e.to_string())?;
    let config = ServiceConfig {
        index_path: corpus_dir.join("index.tvi"),
        corpus_dir,
        model_path: model.to_path_buf(),
        history_path: dir.path().join("history.csv"),
        ..ServiceConfig::default()
    };
    let state = Arc::new(AppState::from_config(config).map_err(|e| e.to_string())?);
    state.load_store().map_err(|e| e.to_string())?;
    let app = router(state.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let mut correct = 0;
        let mut latencies = Vec::new();
        for round in 0..4 {
            for (q, header) in QUESTIONS {
                let t = Instant::now();
                let (status, body) = call(&app, "POST", "/api/ask", json!({ "question": q })).await?;
                latencies.push(t.elapsed());
                ensure(status == StatusCode::OK, || format!("ask {q:?}: {status} {body}"))?;
                ensure(body["status"] == "ok", || format!("ask {q:?} found no context"))?;
                ensure(!body["answer"].as_str().unwrap_or("").trim().is_empty(), || format!("empty answer to {q:?}"))?;
                let sources = body["sources"].as_array().cloned().unwrap_or_default();
                if round == 0 && sources.iter().any(|s| s["header"] == header) {
                    correct += 1;
                }
            }
        }
        ensure(correct >= 1, || "no answer cited a correct source".into())?;

        let mut tasks = Vec::new();
        for i in 0..50 {
            let asker = app.clone();
            let q = QUESTIONS[i % QUESTIONS.len()].0;
            tasks.push(tokio::spawn(async move { call(&asker, "POST", "/api/ask", json!({ "question": q })).await }));
            if i == 20 {
                let writer = app.clone();
                let doc = json!({"documents": [{
                    "source_uri": "memo://holiday",
                    "text": "# Holiday shipping\nDuring December parcels may take two extra days to arrive."
                }]});
                tasks.push(tokio::spawn(async move { call(&writer, "POST", "/api/ingest", doc).await }));
            }
        }
        let mut versions = BTreeSet::new();
        let mut asks = 0;
        for t in tasks {
            let (status, body) = t.await.map_err(|e| e.to_string())??;
            ensure(status == StatusCode::OK, || format!("concurrent request failed: {status} {body}"))?;
            if body.get("blocks_added").is_some() {
                continue;
            }
            asks += 1;
            let v = body["index_version"].as_u64().ok_or("missing index_version")?;
            versions.insert(v);
            let snap = state.snapshot().ok_or("no snapshot")?;
            for s in body["sources"].as_array().cloned().unwrap_or_default() {
                let id = s["block_id"].as_str().unwrap_or("");
                ensure(snap.corpus.block(id).is_some(), || format!("source {id} not in the corpus"))?;
            }
        }
        ensure(asks == 50, || format!("{asks} asks answered"))?;
        ensure(versions.iter().all(|v| *v == 1 || *v == 2), || format!("versions seen {versions:?}"))?;
        let final_version = state.snapshot().ok_or("no snapshot")?.version;
        ensure(final_version == 2, || format!("final version {final_version}"))?;

        latencies.sort();
        let p95 = latencies[(latencies.len() * 95).div_ceil(100) - 1];
        ensure(p95 <= Duration::from_secs(2), || format!("p95 latency {:?}", p95))?;
        Ok(format!(
            "{correct}/{} questions cite the expected block; 50 concurrent asks ok with versions {versions:?}; p95 {:.0} ms",
            QUESTIONS.len(),
            p95.as_secs_f64() * 1000.0
        ))
    })
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {name} ({detail}; {secs:.1}s)");
            true
        }
        Err(why) => {
            println!("FAIL {name} ({why}; {secs:.1}s)");
            false
        }
    }
}

fn main() -> ExitCode {
    let workdir = tempfile::tempdir().expect("temp dir");
    let mut model: Option<PathBuf> = None;
    let results = [
        report("gradient-correctness", gradient_check),
        report("metric-oracles", metric_oracles),
        report("fedavg-algebra", fedavg_algebra),
        report("lossless-transport", lossless_transport),
        report("quantization", quantization),
        report("training-progress", || {
            let (detail, path) = training_progress(workdir.path())?;
            model = Some(path);
            Ok(detail)
        }),
        report("lora-zero-init", lora_zero_init),
        report("retrieval-exactness", retrieval),
        report("corpus-roundtrip", corpus_roundtrip),
        report("service-end-to-end", || service_end_to_end(model.as_deref())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
