//! Named parameter storage shared by a model and its optimizer state.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::tensor::Tensor;

/// All trainable tensors of one model, keyed by stable names, together with
/// first/second Adam moments. `version` increments on every mutation so
/// downstream caches (for example precomputed document embeddings) can tell
/// when they are stale.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a tensor drawn from N(0, std^2).
    pub fn insert_randn(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) {
        let t = Tensor::randn(shape, std, rng);
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_full(&mut self, name: &str, shape: Vec<usize>, fill: f64) {
        self.insert(name, Tensor::full(shape, fill));
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let shape = t.shape().to_vec();
        self.m.insert(name.to_string(), Tensor::zeros(shape.clone()));
        self.v.insert(name.to_string(), Tensor::zeros(shape));
        self.params.insert(name.to_string(), t);
        self.version += 1;
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Mark the store mutated (used by the optimizer after in-place updates).
    pub fn bump_version(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insert_allocates_matching_moments() {
        let mut s = ParamStore::new();
        s.insert_zeros("w", vec![3, 4]);
        assert_eq!(s.m["w"].shape(), &[3, 4]);
        assert_eq!(s.v["w"].shape(), &[3, 4]);
        assert_eq!(s.num_values(), 12);
    }

    #[test]
    fn version_counts_mutations() {
        let mut s = ParamStore::new();
        let v0 = s.version;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        s.insert_randn("w", vec![2], 0.02, &mut rng);
        assert!(s.version > v0);
        let v1 = s.version;
        s.bump_version();
        assert!(s.version > v1);
    }

    #[test]
    fn get_unknown_is_config_error() {
        let s = ParamStore::new();
        assert!(matches!(s.get("nope"), Err(Error::Config(_))));
    }
}
