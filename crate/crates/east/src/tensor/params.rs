//! Named parameter storage shared by models, the optimizer and checkpoints.
//!
//! Stores plain arrays; each forward pass materializes fresh graph leaves
//! over the same (shared, read-only) buffers, so graphs stay thread-local
//! while data is never copied.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PlainTensor<E> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
}

impl<E: Element> PlainTensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        PlainTensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
struct Entry<E> {
    tensor: PlainTensor<E>,
    trainable: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order everywhere, which keeps checkpoints and update loops
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E> {
    entries: BTreeMap<String, Entry<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<E>, trainable: bool) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor: PlainTensor::new(shape.to_vec(), data),
                trainable,
            },
        );
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor<E>, trainable: bool) {
        self.insert(name, t.shape(), t.to_vec(), trainable);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&PlainTensor<E>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        if data.len() != e.tensor.numel() {
            return Err(Error::shape(
                "param_store",
                format!(
                    "{name}: replacing {} elements with {}",
                    e.tensor.numel(),
                    data.len()
                ),
            ));
        }
        e.tensor.data = Arc::new(data);
        Ok(())
    }

    /// Fresh graph leaves over the stored buffers. Trainable entries record
    /// gradients; frozen entries enter the graph as constants.
    pub fn leaves(&self) -> BTreeMap<String, Tensor<E>> {
        self.entries
            .iter()
            .map(|(name, e)| {
                let t = Tensor::from_shared(&e.tensor.shape, Arc::clone(&e.tensor.data), e.trainable)
                    .expect("stored shapes are consistent");
                (name.clone(), t)
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PlainTensor<E>)> {
        self.entries.iter().map(|(n, e)| (n, &e.tensor))
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Precision cast, preserving names, shapes and trainability.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            let data: Vec<F> = e.tensor.data.iter().map(|v| F::of_f64(v.as_f64())).collect();
            out.insert(name, &e.tensor.shape, data, e.trainable);
        }
        out
    }
}
