use crate::tinylm::{ParamSet, Tensor};

use super::FedError;

/// Uniform average of client parameter sets.
///
/// Inputs are summed in ascending client-id order with f64 accumulators, so the
/// result does not depend on the order the list arrives in. Trainable flags are
/// taken from the lowest id.
pub fn fedavg(clients: &[(usize, ParamSet)]) -> Result<ParamSet, FedError> {
    let mut order: Vec<&(usize, ParamSet)> = clients.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    if let Some(w) = order.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(FedError::DuplicateClient(w[0].0));
    }
    let (_, first) = *order.first().ok_or(FedError::EmptyList)?;
    for (_, p) in &order[1..] {
        first.ensure_aligned(p)?;
    }
    let k = order.len() as f64;
    let mut out = ParamSet::new();
    for (name, param) in first.iter() {
        let mut acc = vec![0.0f64; param.tensor.numel()];
        for (_, p) in &order {
            for (a, &v) in acc.iter_mut().zip(p.tensor(name)?.data()) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|a| (a / k) as f32).collect();
        out.insert(name, Tensor::new(param.tensor.shape().to_vec(), data)?, param.trainable);
    }
    Ok(out)
}
