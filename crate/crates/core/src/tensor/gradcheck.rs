use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// A scalar function of a parameter store, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, graph: &mut Graph<T>, params: &ParameterStore<T>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, applied in 64-bit.
    pub eps: f64,
    pub seed: u64,
    /// Upper bound on checked coordinates per tensor; larger tensors are
    /// sampled with `seed`.
    pub max_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            seed: 0,
            max_coords: 64,
            floor: 1e-4,
        }
    }
}

/// Worst relative error between 64-bit analytic gradients and central
/// differences over the trainable parameters of `params`.
pub fn grad_check<F: ScalarFn>(f: &F, params: &ParameterStore<f64>, eps: f64, seed: u64) -> Result<f64> {
    let cfg = GradCheckConfig {
        eps,
        seed,
        ..GradCheckConfig::default()
    };
    grad_check_with::<f64, F>(f, params, &cfg)
}

/// Like [`grad_check`] but with analytic gradients computed at precision
/// `T`. The finite-difference reference is always evaluated in 64-bit.
pub fn grad_check_with<T: Real, F: ScalarFn>(
    f: &F,
    params: &ParameterStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<f64> {
    let mut analytic_store = params.cast::<T>();
    analytic_store.zero_grad();
    let mut graph = Graph::<T>::new();
    let loss = f.eval(&mut graph, &analytic_store)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    graph.backward(loss)?;
    analytic_store.accumulate_grads(&graph);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        if !params.is_trainable(id) {
            continue;
        }
        let numel = params.value(id).numel();
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            let mut c = index::sample(&mut rng, numel, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let original = work.value(id).data()[c];
            work.value_mut(id).data_mut()[c] = original + cfg.eps;
            let plus = eval_scalar(f, &work)?;
            work.value_mut(id).data_mut()[c] = original - cfg.eps;
            let minus = eval_scalar(f, &work)?;
            work.value_mut(id).data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = analytic_store
                .grad(id)
                .map(|g| g.data()[c].as_f64())
                .unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval_scalar<F: ScalarFn>(f: &F, params: &ParameterStore<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let v = f.eval(&mut g, params)?;
    Ok(g.value(v).data()[0])
}
