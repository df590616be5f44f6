use rayon::prelude::*;
use serde::Serialize;

use crate::peft::{checkpoint_apply, checkpoint_save, params_diff, Checkpoint, CheckpointDiff};
use crate::tinylm::{ModelConfig, ParamSet};

use super::quant::{dequantize, quantize, QuantizedParams};
use super::{client_update, fedavg, ClientState, FedError, QuantBits, RoundConfig, TransportMode};

/// Byte ledger for one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportRecord {
    pub round: usize,
    pub mode: TransportMode,
    pub quantized: bool,
    /// `(client_id, bytes)` in client-id order.
    pub uplink: Vec<(usize, usize)>,
    /// Bytes sent back to each client after aggregation.
    pub downlink_per_client: usize,
}

impl TransportRecord {
    pub fn uplink_total(&self) -> usize {
        self.uplink.iter().map(|(_, b)| b).sum()
    }

    pub fn downlink_total(&self) -> usize {
        self.downlink_per_client * self.uplink.len()
    }

    pub fn uplink_of(&self, client_id: usize) -> Option<usize> {
        self.uplink.iter().find(|(id, _)| *id == client_id).map(|(_, b)| *b)
    }
}

/// Serializes a client's model for the server.
pub fn encode_payload(
    start: &Checkpoint,
    local: &ParamSet,
    mode: TransportMode,
    quant: QuantBits,
    tau: f32,
) -> Result<Vec<u8>, FedError> {
    let selected = match mode {
        TransportMode::Full => local.clone(),
        TransportMode::AdaptersOnly => local.trainable_subset(),
        TransportMode::Diff => {
            if quant != QuantBits::None {
                return Err(FedError::InvalidConfig("quantized diff transport".into()));
            }
            return Ok(params_diff(start.params(), start.content_hash(), local, tau)?.encode());
        }
    };
    Ok(match quant {
        QuantBits::None => checkpoint_save(&selected, start.round).encode(),
        QuantBits::Bits(b) => quantize(&selected, b)?.encode(),
    })
}

/// Rebuilds a full parameter set from a payload made by [`encode_payload`].
pub fn decode_payload(
    start: &Checkpoint,
    payload: &[u8],
    mode: TransportMode,
    quant: QuantBits,
) -> Result<ParamSet, FedError> {
    if mode == TransportMode::Diff {
        let diff = CheckpointDiff::decode(payload)?;
        return Ok(checkpoint_apply(start, &diff)?);
    }
    let received = match quant {
        QuantBits::None => Checkpoint::decode(payload)?.into_params(),
        QuantBits::Bits(_) => dequantize(&QuantizedParams::decode(payload)?),
    };
    if mode == TransportMode::Full {
        start.params().ensure_aligned(&received)?;
        return Ok(received);
    }
    let mut out = start.params().clone();
    for (name, p) in received.iter() {
        let slot = out
            .tensor_mut(name)
            .map_err(|_| FedError::PayloadMismatch(format!("unknown entry `{name}`")))?;
        if slot.shape() != p.tensor.shape() || !start.params().is_trainable(name) {
            return Err(FedError::PayloadMismatch(format!(
                "entry `{name}` does not match the global model"
            )));
        }
        *slot = p.tensor.clone();
    }
    Ok(out)
}

/// What the server broadcasts after aggregation.
pub fn encode_downlink(
    start: &Checkpoint,
    new_global: &ParamSet,
    mode: TransportMode,
    tau: f32,
) -> Result<Vec<u8>, FedError> {
    encode_payload(start, new_global, mode, QuantBits::None, tau)
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub global: ParamSet,
    pub record: TransportRecord,
    /// Each client's locally trained model, in client-id order.
    pub client_params: Vec<(usize, ParamSet)>,
}

/// One federated round: local training, uplink encoding, server-side
/// reconstruction, averaging and the broadcast ledger entry.
pub fn run_round(
    global: &ParamSet,
    clients: &mut [ClientState],
    cfg: &ModelConfig,
    rc: &RoundConfig,
    tau: f32,
    round: usize,
) -> Result<RoundOutcome, FedError> {
    if clients.is_empty() {
        return Err(FedError::EmptyList);
    }
    let start = checkpoint_save(global, round as u32);
    let results = clients
        .par_iter_mut()
        .map(|client| {
            let local = client_update(global, client, cfg, rc.lr, rc.local_steps)?;
            let payload = encode_payload(&start, &local, rc.transport_mode, rc.quant_bits, tau)?;
            let received = decode_payload(&start, &payload, rc.transport_mode, rc.quant_bits)?;
            Ok((client.client_id, local, payload.len(), received))
        })
        .collect::<Result<Vec<_>, FedError>>()?;
    let mut results = results;
    results.sort_by_key(|r| r.0);
    let received: Vec<(usize, ParamSet)> = results.iter().map(|r| (r.0, r.3.clone())).collect();
    let new_global = fedavg(&received)?;
    let downlink = encode_downlink(&start, &new_global, rc.transport_mode, tau)?;
    let record = TransportRecord {
        round,
        mode: rc.transport_mode,
        quantized: rc.quant_bits != QuantBits::None,
        uplink: results.iter().map(|r| (r.0, r.2)).collect(),
        downlink_per_client: downlink.len(),
    };
    Ok(RoundOutcome {
        global: new_global,
        record,
        client_params: results.into_iter().map(|r| (r.0, r.1)).collect(),
    })
}
