use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tinylm::{grad, sgd_step, ModelConfig, ParamSet, TokenId, Tokenizer, TrainBatch};

use super::FedError;

/// One simulated client: a private token stream and its own batch sampler.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    stream: Vec<TokenId>,
    batch_size: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

/// Documents joined into one stream, each wrapped in BOS/EOS.
pub fn document_stream<S: AsRef<str>>(docs: &[S]) -> Vec<TokenId> {
    let tok = Tokenizer::new();
    docs.iter()
        .flat_map(|d| tok.tokenize(d.as_ref().as_bytes(), true, true))
        .collect()
}

impl ClientState {
    pub fn new<S: AsRef<str>>(client_id: usize, docs: &[S], batch_size: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            client_id,
            stream: document_stream(docs),
            batch_size: batch_size.max(1),
            seq_len: seq_len.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream_len(&self) -> usize {
        self.stream.len()
    }

    /// Draws `batch_size` windows of `seq_len + 1` tokens at uniform offsets.
    pub fn next_batch(&mut self) -> Result<TrainBatch, FedError> {
        if self.stream.len() < 2 {
            return Err(FedError::EmptyDataset(self.client_id));
        }
        let width = (self.seq_len + 1).min(self.stream.len());
        let last = self.stream.len() - width;
        let rows: Vec<Vec<TokenId>> = (0..self.batch_size)
            .map(|_| {
                let start = self.rng.random_range(0..=last);
                self.stream[start..start + width].to_vec()
            })
            .collect();
        Ok(TrainBatch::from_sequences(&rows, self.seq_len)?)
    }
}

/// `steps` sequential SGD steps from `global` on the client's batches.
pub fn client_update(
    global: &ParamSet,
    client: &mut ClientState,
    cfg: &ModelConfig,
    lr: f32,
    steps: usize,
) -> Result<ParamSet, FedError> {
    if client.stream.len() < 2 {
        return Err(FedError::EmptyDataset(client.client_id));
    }
    let mut theta = global.clone();
    for _ in 0..steps {
        let batch = client.next_batch()?;
        let g = grad(&theta, cfg, &batch)?;
        theta = sgd_step(&theta, &g, lr)?;
    }
    Ok(theta)
}
