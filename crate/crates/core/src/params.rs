//! Named trainable parameters, kept as plain value buffers outside any
//! tape. Each forward pass loads them onto a fresh tape as differentiable
//! leaves, which keeps the store `Sync` and lets batches run in parallel.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameters; names are unique and iteration
/// order is registration order (deterministic).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {shape:?} vs {} values",
                values.len()
            )));
        }
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.entries.push(ParamEntry { name: name.to_string(), shape, values });
        Ok(idx)
    }

    /// Registers a matrix with entries uniform in `±1/sqrt(fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        seed: u64,
    ) -> Result<usize> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = stream_rng(seed, name);
        let n = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set_values(&mut self, idx: usize, values: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[idx];
        if values.len() != e.values.len() {
            return Err(Error::Dimension(format!(
                "parameter {}: cannot replace {} values with {}",
                e.name,
                e.values.len(),
                values.len()
            )));
        }
        e.values = values;
        Ok(())
    }
}
