use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::digest::derive_seed;
use crate::metrics::{evaluate_model, MetricsReport};
use crate::peft::{attach_lora, attach_prefix, default_alpha, default_lora_targets};
use crate::tinylm::{loss_value, ModelConfig, ParamSet, TokenId, TrainBatch};

use super::client::document_stream;
use super::history::{HistoryRow, RunHistory, GLOBAL_ID};
use super::{run_round, AdapterMode, ClientState, FedError, RunConfig, TransportRecord};

/// Held-out data: loss windows and prompt/continuation pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub batch: TrainBatch,
    pub pairs: Vec<(String, String)>,
}

fn floor_boundary(s: &str, mut i: usize) -> usize {
    i = i.min(s.len());
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Consecutive `seq_len + 1` windows of the joined documents, plus pairs cut
/// round-robin from each document: `pair_bytes` of prompt followed by
/// `pair_bytes` of reference.
pub fn build_eval_set<S: AsRef<str>>(
    docs: &[S],
    seq_len: usize,
    windows: usize,
    pairs: usize,
    pair_bytes: usize,
) -> Result<EvalSet, FedError> {
    let stream = document_stream(docs);
    if stream.len() < 2 {
        return Err(FedError::EmptyDataset(usize::MAX));
    }
    let rows: Vec<Vec<TokenId>> = stream
        .windows((seq_len + 1).min(stream.len()))
        .step_by(seq_len)
        .take(windows.max(1))
        .map(<[TokenId]>::to_vec)
        .collect();
    let batch = TrainBatch::from_sequences(&rows, seq_len)?;
    let mut out = Vec::new();
    let mut offset = 0;
    while out.len() < pairs {
        let mut any = false;
        for doc in docs {
            let text = doc.as_ref();
            let a = floor_boundary(text, offset);
            let b = floor_boundary(text, a + pair_bytes);
            let c = floor_boundary(text, b + pair_bytes);
            if c - b < pair_bytes / 2 || b == a {
                continue;
            }
            any = true;
            out.push((text[a..b].to_string(), text[b..c].to_string()));
            if out.len() == pairs {
                break;
            }
        }
        if !any {
            break;
        }
        offset += 2 * pair_bytes;
    }
    Ok(EvalSet { batch, pairs: out })
}

/// Seeded shuffle of document indices; the first share is held out for
/// evaluation and the rest is cut into `k` contiguous shards.
pub fn partition(
    n_docs: usize,
    k: usize,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Vec<usize>>), FedError> {
    let n_eval = ((eval_fraction * n_docs as f64).ceil() as usize).max(1);
    if n_docs < n_eval + k {
        return Err(FedError::NotEnoughDocuments {
            docs: n_docs,
            needed: n_eval + k,
        });
    }
    let mut idx: Vec<usize> = (0..n_docs).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "partition")));
    let eval = idx[..n_eval].to_vec();
    let rest = &idx[n_eval..];
    let shards = (0..k)
        .map(|i| rest[i * rest.len() / k..(i + 1) * rest.len() / k].to_vec())
        .collect();
    Ok((eval, shards))
}

/// Attaches the configured adapter to `base`.
pub fn prepare_model(cfg: &RunConfig, base: &ParamSet) -> Result<(ParamSet, ModelConfig), FedError> {
    let model = &cfg.model;
    Ok(match cfg.adapter {
        AdapterMode::None => {
            let mut p = base.clone();
            for (_, param) in p.iter_mut() {
                param.trainable = true;
            }
            (p, model.clone())
        }
        AdapterMode::Lora => {
            let alpha = cfg.lora_alpha.unwrap_or_else(|| default_alpha(cfg.lora_rank));
            attach_lora(base, model, &default_lora_targets(model), cfg.lora_rank, alpha)?
        }
        AdapterMode::Prefix => attach_prefix(base, model, cfg.prefix_len)?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: RunHistory,
    pub params: ParamSet,
    pub model: ModelConfig,
    pub transport: Vec<TransportRecord>,
}

fn eval_row(
    round: usize,
    id: String,
    params: &ParamSet,
    cfg: &ModelConfig,
    eval: &EvalSet,
    bytes: (usize, usize),
) -> Result<HistoryRow, FedError> {
    let loss = loss_value(params, cfg, &eval.batch)?;
    let m = if eval.pairs.is_empty() {
        None
    } else {
        Some(evaluate_model(params, cfg, &eval.pairs)?)
    };
    let get = |f: fn(&MetricsReport) -> f64| m.as_ref().map_or(0.0, f);
    Ok(HistoryRow {
        round,
        client_id: id,
        loss,
        rouge1: get(|r| r.rouge1),
        rouge2: get(|r| r.rouge2),
        rouge_l: get(|r| r.rouge_l),
        bleu4: get(|r| r.bleu4),
        uplink_bytes: bytes.0 as u64,
        downlink_bytes: bytes.1 as u64,
    })
}

/// Full federated run over `docs`, starting from the unadapted `base`.
pub fn run_training<S: AsRef<str>>(cfg: &RunConfig, docs: &[S], base: &ParamSet) -> Result<RunOutput, FedError> {
    run_training_with(cfg, docs, base, |_| {})
}

/// Like [`run_training`], calling `on_row` as each history row is produced.
pub fn run_training_with<S: AsRef<str>>(
    cfg: &RunConfig,
    docs: &[S],
    base: &ParamSet,
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<RunOutput, FedError> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(FedError::NotEnoughDocuments { docs: 0, needed: 2 });
    }
    let rc = &cfg.round;
    let (mut global, model) = prepare_model(cfg, base)?;
    let (eval_idx, shards) = partition(docs.len(), rc.num_clients, cfg.eval_fraction, cfg.seed)?;
    let eval_docs: Vec<&str> = eval_idx.iter().map(|&i| docs[i].as_ref()).collect();
    let eval = build_eval_set(
        &eval_docs,
        cfg.seq_len,
        cfg.eval_windows,
        cfg.eval_pairs,
        cfg.eval_pair_bytes,
    )?;
    let mut clients: Vec<ClientState> = shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let texts: Vec<&str> = shard.iter().map(|&i| docs[i].as_ref()).collect();
            let seed = derive_seed(cfg.seed, &format!("client{k}"));
            ClientState::new(k + 1, &texts, cfg.batch_size, cfg.seq_len, seed)
        })
        .collect();

    let mut history = RunHistory::default();
    let mut push = |row: HistoryRow, history: &mut RunHistory| {
        on_row(&row);
        history.rows.push(row);
    };
    push(
        eval_row(0, GLOBAL_ID.into(), &global, &model, &eval, (0, 0))?,
        &mut history,
    );
    let mut transport = Vec::with_capacity(rc.rounds);
    for round in 1..=rc.rounds {
        let out = run_round(&global, &mut clients, &model, rc, cfg.diff_tau, round)?;
        global = out.global;
        if round % rc.eval_every == 0 || round == rc.rounds {
            let rec = &out.record;
            let bytes = (rec.uplink_total(), rec.downlink_total());
            push(
                eval_row(round, GLOBAL_ID.into(), &global, &model, &eval, bytes)?,
                &mut history,
            );
            for (id, local) in &out.client_params {
                let bytes = (rec.uplink_of(*id).unwrap_or(0), rec.downlink_per_client);
                push(
                    eval_row(round, id.to_string(), local, &model, &eval, bytes)?,
                    &mut history,
                );
            }
        }
        transport.push(out.record);
    }
    Ok(RunOutput {
        history,
        params: global,
        model,
        transport,
    })
}
