//! Named, ordered parameter collections shared by all networks.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Ordered map from parameter name to tensor. Order is declaration order and
/// is the serialization order of checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        debug_assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Elementwise `a += scale * b` over matching names.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) -> Result<(), NumericsError> {
        for (name, t) in self.entries.iter_mut() {
            let o = other.get(name).ok_or_else(|| {
                NumericsError::BadShape(format!("missing parameter {name} in axpy operand"))
            })?;
            if o.shape() != t.shape() {
                return Err(NumericsError::BadShape(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Zero-filled set with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}
