use super::{ModelError, TokenId, Tokenizer};

/// Token matrices for one training step. Row `r` predicts `targets[r][t]` from
/// `inputs[r][..=t]`; positions with `loss_mask == false` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl TrainBatch {
    /// Builds a batch from token sequences, each of at most `seq_len + 1` tokens.
    /// Targets are inputs shifted left by one; short rows are padded and masked.
    pub fn from_sequences(seqs: &[Vec<TokenId>], seq_len: usize) -> Result<Self, ModelError> {
        let starts = vec![0; seqs.len()];
        Self::from_supervised(seqs, &starts, seq_len)
    }

    /// Like [`TrainBatch::from_sequences`], but only tokens at index
    /// `>= supervise_from[r]` of sequence `r` are scored as targets.
    pub fn from_supervised(
        seqs: &[Vec<TokenId>],
        supervise_from: &[usize],
        seq_len: usize,
    ) -> Result<Self, ModelError> {
        if seqs.len() != supervise_from.len() {
            return Err(ModelError::ShapeMismatch("one supervision start per row".into()));
        }
        let mut inputs = Vec::with_capacity(seqs.len() * seq_len);
        let mut targets = Vec::with_capacity(seqs.len() * seq_len);
        let mut loss_mask = Vec::with_capacity(seqs.len() * seq_len);
        for (seq, &from) in seqs.iter().zip(supervise_from) {
            if seq.len() > seq_len + 1 {
                return Err(ModelError::SequenceTooLong {
                    len: seq.len() - 1,
                    max: seq_len,
                });
            }
            for t in 0..seq_len {
                if t + 1 < seq.len() {
                    inputs.push(seq[t]);
                    targets.push(seq[t + 1]);
                    loss_mask.push(t + 1 >= from);
                } else {
                    inputs.push(Tokenizer::PAD);
                    targets.push(Tokenizer::PAD);
                    loss_mask.push(false);
                }
            }
        }
        Ok(Self {
            batch: seqs.len(),
            seq_len,
            inputs,
            targets,
            loss_mask,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.batch * self.seq_len;
        if self.inputs.len() != n || self.targets.len() != n || self.loss_mask.len() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "batch {}x{} with {} inputs, {} targets, {} mask entries",
                self.batch,
                self.seq_len,
                self.inputs.len(),
                self.targets.len(),
                self.loss_mask.len()
            )));
        }
        Ok(())
    }

    pub fn input_row(&self, r: usize) -> &[TokenId] {
        &self.inputs[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn target_row(&self, r: usize) -> &[TokenId] {
        &self.targets[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.loss_mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    pub fn input_rows(&self) -> Vec<Vec<TokenId>> {
        (0..self.batch).map(|r| self.input_row(r).to_vec()).collect()
    }
}
