use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{MagnetError, Result};

/// One named parameter or buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor<f64>,
    /// Buffers (batch-norm running stats, frozen input statistics, expert
    /// priors) are stored alongside weights but never receive updates.
    pub trainable: bool,
}

/// Ordered, name-addressable parameter collection. Master copies are kept at
/// 64-bit regardless of the precision a forward pass runs at.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f64>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(MagnetError::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| MagnetError::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        Ok(&self.entries[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let id = self.id(name)?;
        if self.entries[id].value.shape() != value.shape() {
            return Err(crate::error::dim_err(
                "param set",
                self.entries[id].value.shape(),
                value.shape(),
            ));
        }
        self.entries[id].value = value;
        Ok(())
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| i)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut store = Self::new();
        for e in entries {
            store.insert(&e.name, e.value, e.trainable)?;
        }
        Ok(store)
    }
}

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
