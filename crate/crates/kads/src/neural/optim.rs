//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::store::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One bias-corrected AdamW update over every parameter present in `grads`.
/// Parameters without an entry in `grads` are left untouched, moments
/// included, which is how stage freezing is implemented upstream.
/// `step_index` is 1-based.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &OptimConfig,
    step_index: u64,
) -> Result<()> {
    cfg.validate()?;
    if step_index == 0 {
        return Err(Error::Config("adamw step_index must be >= 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step_index as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step_index as i32);
    for (name, g) in grads {
        let w = store
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter: {name}")))?;
        if g.len() != w.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: w.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} for parameter {name}"
            )));
        }
        let m = store.m.get_mut(name).expect("moment matches param").data_mut();
        let v = store.v.get_mut(name).expect("moment matches param").data_mut();
        let wd = w.data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            wd[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            wd[i] -= cfg.learning_rate * cfg.weight_decay * wd[i];
        }
    }
    store.step = step_index;
    store.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tensor::Tensor;

    fn one_param_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = one_param_store(1.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        adamw_step(&mut s, &grads, &cfg, 1).unwrap();
        assert_eq!(s.params["w"].data()[0], 1.5);
    }

    #[test]
    fn bias_corrected_first_step_moves_by_full_lr() {
        // w=1, g=1, lr=0.1, wd=0: m̂ = v̂ = 1, so w -> 1 - 0.1/(1+eps).
        let mut s = one_param_store(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        let cfg = OptimConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 1,
        };
        adamw_step(&mut s, &grads, &cfg, 1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.params["w"].data()[0] - expect).abs() < 1e-15);
        assert!((s.params["w"].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_weight_markedly() {
        // g=0 with zero moments: only the decay term acts, w -> w * (1 - lr*wd).
        let mut s = one_param_store(2.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        adamw_step(&mut s, &grads, &cfg, 1).unwrap();
        assert!((s.params["w"].data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_error_names_the_parameter() {
        let mut s = one_param_store(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        match adamw_step(&mut s, &grads, &OptimConfig::default(), 1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w')),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_across_identical_runs() {
        let run = || {
            let mut s = one_param_store(0.37);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![0.123456]);
            for t in 1..=25 {
                adamw_step(&mut s, &grads, &OptimConfig::default(), t).unwrap();
            }
            s.params["w"].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untouched_parameter_keeps_weights_and_moments() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap());
        s.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![0.5]);
        adamw_step(&mut s, &grads, &OptimConfig::default(), 1).unwrap();
        assert_eq!(s.params["b"].data()[0], 2.0);
        assert_eq!(s.m["b"].data()[0], 0.0);
        assert_eq!(s.v["b"].data()[0], 0.0);
        assert!(s.params["a"].data()[0] != 1.0);
    }
}
