//! Per-tensor affine 8-bit quantization.
//!
//! Wire form: magic `TLQ1`, u32 entry count, then per entry: u32-prefixed name,
//! u8 trainable flag, u32 rank, u32 dims, f32 scale, i32 zero point and one
//! code byte per element.

use std::collections::BTreeMap;

use crate::tinylm::{Param, ParamSet, Tensor};
use crate::wire::{Reader, WireError, Writer};

use super::FedError;

pub const QUANT_MAGIC: &[u8; 4] = b"TLQ1";

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub scale: f32,
    pub zero_point: i32,
    pub codes: Vec<u8>,
    pub trainable: bool,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        let s = self.scale as f64;
        let data = self
            .codes
            .iter()
            .map(|&q| ((q as i32 - self.zero_point) as f64 * s) as f32)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }

    /// Largest possible dequantization error for a non-constant tensor.
    pub fn half_step(&self) -> f64 {
        self.scale.abs() as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedParams {
    pub entries: BTreeMap<String, QuantizedTensor>,
}

impl QuantizedParams {
    pub fn max_half_step(&self) -> f64 {
        self.entries
            .values()
            .map(QuantizedTensor::half_step)
            .fold(0.0, f64::max)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(QUANT_MAGIC);
        w.u32(self.entries.len() as u32);
        for (name, q) in &self.entries {
            w.prefixed(name.as_bytes());
            w.u8(q.trainable as u8);
            w.u32(q.shape.len() as u32);
            for &d in &q.shape {
                w.u32(d as u32);
            }
            w.f32(q.scale);
            w.i32(q.zero_point);
            w.bytes(&q.codes);
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        r.expect_magic(QUANT_MAGIC)?;
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let name = r.prefixed_str()?.to_string();
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| WireError::Invalid(format!("shape overflow for `{name}`")))?;
            let scale = r.f32()?;
            let zero_point = r.i32()?;
            let codes = r.take(numel)?.to_vec();
            let q = QuantizedTensor {
                shape,
                scale,
                zero_point,
                codes,
                trainable,
            };
            if entries.insert(name.clone(), q).is_some() {
                return Err(WireError::Invalid(format!("duplicate entry `{name}`")));
            }
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

pub fn quantize_tensor(t: &Tensor, trainable: bool, name: &str) -> Result<QuantizedTensor, FedError> {
    let data = t.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FedError::NonFiniteValue(name.to_string()));
    }
    let (min, max) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if data.is_empty() || min == max {
        // a constant c is stored as one step of size |c| from a zero point of 0 or 2
        let c = data.first().copied().unwrap_or(0.0);
        let code = u8::from(c != 0.0);
        return Ok(QuantizedTensor {
            shape: t.shape().to_vec(),
            scale: c.abs(),
            zero_point: if c < 0.0 { 2 } else { 0 },
            codes: vec![code; data.len()],
            trainable,
        });
    }
    let exact = (max - min) / 255.0;
    let mut scale = exact as f32;
    if (scale as f64) < exact {
        scale = scale.next_up();
    }
    let s = scale as f64;
    let zero_point = (-min / s).round() as i32;
    let codes = data
        .iter()
        .map(|&v| ((v as f64 / s).round() + zero_point as f64).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        scale,
        zero_point,
        codes,
        trainable,
    })
}

pub fn quantize(params: &ParamSet, bits: u8) -> Result<QuantizedParams, FedError> {
    if bits != 8 {
        return Err(FedError::UnsupportedBits(bits));
    }
    let mut entries = BTreeMap::new();
    for (name, p) in params.iter() {
        entries.insert(name.to_string(), quantize_tensor(&p.tensor, p.trainable, name)?);
    }
    Ok(QuantizedParams { entries })
}

pub fn dequantize(q: &QuantizedParams) -> ParamSet {
    q.entries
        .iter()
        .map(|(name, t)| {
            let param = Param {
                tensor: t.dequantize(),
                trainable: t.trainable,
            };
            (name.clone(), param)
        })
        .collect()
}
