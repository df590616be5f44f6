use std::collections::BTreeMap;

use super::ModelError;

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ModelError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, ModelError> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A named parameter together with its trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Flat named-tensor store. Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), ModelError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Marks every entry frozen.
    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Two sets are aligned iff they hold identical name and shape sets.
    pub fn is_aligned(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.tensor.shape == b.tensor.shape)
    }

    pub fn ensure_aligned(&self, other: &ParamSet) -> Result<(), ModelError> {
        if self.is_aligned(other) {
            return Ok(());
        }
        let mine: Vec<_> = self.names().collect();
        let theirs: Vec<_> = other.names().collect();
        let diff = mine
            .iter()
            .find(|n| !other.contains(n))
            .or_else(|| theirs.iter().find(|n| !self.contains(n)))
            .map(|n| format!("entry `{n}` present on one side only"))
            .unwrap_or_else(|| {
                let name = self
                    .iter()
                    .find(|(n, p)| other.tensor(n).map(|t| t.shape != p.tensor.shape).unwrap_or(true))
                    .map(|(n, _)| n.to_string())
                    .unwrap_or_default();
                format!("shape mismatch on `{name}`")
            });
        Err(ModelError::MisalignedParams(diff))
    }

    /// Same names, shapes and trainable flags, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    Param {
                        tensor: Tensor::zeros(p.tensor.shape.clone()),
                        trainable: p.trainable,
                    },
                )
            })
            .collect();
        ParamSet { entries }
    }

    /// Bitwise equality of names, flags, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.trainable == b.trainable && a.tensor.bitwise_eq(&b.tensor))
    }

    /// Largest elementwise absolute difference between two aligned sets.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64, ModelError> {
        self.ensure_aligned(other)?;
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        Ok(worst)
    }

    /// Subset holding only the trainable entries.
    pub fn trainable_subset(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect();
        ParamSet { entries }
    }
}

impl FromIterator<(String, Param)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Param)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}
