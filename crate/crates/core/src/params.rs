//! Named parameter storage shared by models, the optimizer, and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle into a [`ParamSet`]; indices are assigned in insertion order,
/// which makes optimizer state and checkpoints deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Snapshot of all parameter values, in insertion order.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.clone()).collect()
    }

    /// Restore values captured by [`ParamSet::values`].
    pub fn restore(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::contract("parameter snapshot length mismatch"));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if t.data.len() != v.len() {
                return Err(Error::contract("parameter snapshot shape mismatch"));
            }
            t.data.copy_from_slice(v);
        }
        Ok(())
    }

    /// Overwrite tensors by name from another set (used when loading
    /// checkpoints into a freshly constructed model).
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Incompatible(
                "checkpoint parameter names do not match model".into(),
            ));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.shape != o.shape {
                return Err(Error::Incompatible(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    t.shape, o.shape
                )));
            }
            t.data.copy_from_slice(&o.data);
        }
        Ok(())
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data, requires_grad: false, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ids_follow_insertion_order() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::vector(vec![1.0]));
        let b = ps.add("b", Tensor::vector(vec![2.0, 3.0]));
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(ps.id_of("b"), Some(b));
        assert_eq!(ps.total_elements(), 3);
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = init_uniform(vec![4, 4], 4, &mut rng);
        assert!(t.data.iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn restore_round_trips() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.0, 2.0]));
        let snap = ps.values();
        ps.get_mut(ParamId(0)).data[0] = 9.0;
        ps.restore(&snap).unwrap();
        assert_eq!(ps.get(ParamId(0)).data, vec![1.0, 2.0]);
    }
}
