//! Finite-difference validation of analytic gradients.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::store::ParamStore;

/// Compare the analytic gradient of `f` against central finite differences
/// on a random subsample of at least 64 parameter coordinates (all of them
/// when the store is smaller). Returns the maximum relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
///
/// `f` must build a scalar loss node from the given store; it is called once
/// for the analytic pass and twice per sampled coordinate.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Bounds(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let loss = f(params, &mut g)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::Numeric(format!(
            "loss is not finite at the given parameters: {}",
            g.scalar(loss)
        )));
    }
    g.backward(loss)?;
    let analytic = g.param_grads();

    let mut coords = Vec::new();
    for (name, t) in &params.params {
        for i in 0..t.len() {
            coords.push((name.clone(), i));
        }
    }
    let budget = max_coords.max(64).min(coords.len());
    let picked = rand::seq::index::sample(rng, coords.len(), budget);

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for idx in picked {
        let (name, i) = &coords[idx];
        let orig = work.params[name].data()[*i];

        work.params.get_mut(name).unwrap().data_mut()[*i] = orig + eps;
        let f_plus = eval_scalar(&f, &work)?;
        work.params.get_mut(name).unwrap().data_mut()[*i] = orig - eps;
        let f_minus = eval_scalar(&f, &work)?;
        work.params.get_mut(name).unwrap().data_mut()[*i] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic[name][*i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(params, &mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("perturbed loss is not finite: {v}")));
    }
    Ok(v)
}
