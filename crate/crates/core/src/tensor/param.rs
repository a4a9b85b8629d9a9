//! Named parameters and the per-model registry.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named, optionally trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Counting filter for [`ParamRegistry::count_values`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Trainable,
    Frozen,
}

/// Ordered collection of uniquely named parameters. Insertion order is the
/// construction order of the model and is deterministic; serialization
/// sorts by name so on-disk layout is canonical.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(())
    }

    /// Replace the value of an existing parameter; the shape may change
    /// (vocabulary swap resizes the embedding). Resets its gradient.
    pub fn replace_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        self.params[idx].grad = Tensor::zeros(value.shape().to_vec());
        self.params[idx].value = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<T>> {
        let idx = self.by_name.remove(name)?;
        let p = self.params.remove(idx);
        for (_, v) in self.by_name.iter_mut() {
            if *v > idx {
                *v -= 1;
            }
        }
        Some(p)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Names sorted lexicographically (canonical serialization order).
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names
    }

    /// Total scalar element count under a filter.
    pub fn count_values(&self, filter: ParamFilter) -> usize {
        self.params
            .iter()
            .filter(|p| match filter {
                ParamFilter::All => true,
                ParamFilter::Trainable => p.trainable,
                ParamFilter::Frozen => !p.trainable,
            })
            .map(|p| p.value.numel())
            .sum()
    }

    /// Mark parameters trainable iff their name starts with any prefix.
    pub fn set_trainable_by_prefixes(&mut self, prefixes: &[String]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::ZERO;
            }
        }
    }

    /// Concatenated little-endian value bytes of all parameters whose name
    /// starts with `prefix`, in sorted-name order. The bit-exact witness
    /// used by the freeze-soundness checks.
    pub fn bytes_of_prefix(&self, prefix: &str) -> Vec<u8> {
        let mut names = self.sorted_names();
        names.retain(|n| n.starts_with(prefix));
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(&self.get(&n).unwrap().value.le_bytes());
        }
        out
    }

    /// Names of parameters whose value bytes differ from `other`'s.
    /// Parameters present on only one side are reported too.
    pub fn diff_names(&self, other: &ParamRegistry<T>) -> Vec<String> {
        let mut names: Vec<String> = self.sorted_names();
        for n in other.sorted_names() {
            if !self.contains(&n) {
                names.push(n);
            }
        }
        names.sort();
        names.dedup();
        names
            .into_iter()
            .filter(|n| match (self.get(n), other.get(n)) {
                (Some(a), Some(b)) => a.value.le_bytes() != b.value.le_bytes(),
                _ => true,
            })
            .collect()
    }
}
