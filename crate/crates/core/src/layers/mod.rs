//! Neural building blocks over the autodiff [`Graph`](crate::tensor::Graph).
//!
//! Every block is a small struct of [`ParamId`]s registered in a
//! [`ParameterStore`] under a dotted name prefix; forward passes read the
//! current values from the store so the same struct serves training,
//! evaluation and gradient checking at either precision.

mod attention;
mod init;
mod lstm;
mod transformer;

pub use attention::{AttentionMask, AttentionParams};
pub use init::Initializer;
pub use lstm::{LstmCell, LstmParams};
pub use transformer::{DecoderLayer, EncoderLayer, FeedForward};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl LinearParams {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        inp: usize,
        out: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), init.scaled_normal(&[out, inp], inp))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([out]))?;
        Ok(Self {
            weight,
            bias,
            inp,
            out,
        })
    }

    /// `y = x·Wᵀ + b` over the trailing axis.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn register<T: Real>(store: &mut ParameterStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d], T::one()))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Gathers embedding rows for `ids` laid out as `ids_shape`.
pub fn embedding_lookup<T: Real>(
    g: &mut Graph<T>,
    table: Var,
    ids: &[usize],
    ids_shape: &[usize],
) -> Result<Var> {
    g.embedding(table, ids, ids_shape)
}

pub(crate) fn expect_last_dim<T: Real>(g: &Graph<T>, x: Var, d: usize, op: &'static str) -> Result<()> {
    if g.shape(x).last() != Some(&d) {
        return Err(Error::Shape {
            op,
            lhs: g.shape(x).to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}
