use super::{expect_last_dim, Initializer, LinearParams};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Real, Var};

/// Boolean `[B×T_q×T_k]` mask; `true` marks keys a query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub keep: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, queries: usize, keys: usize) -> Self {
        Self {
            batch,
            queries,
            keys,
            keep: vec![true; batch * queries * keys],
        }
    }

    /// Every query sees exactly the real keys; `key_real` is `[B×T_k]`.
    pub fn key_padding(key_real: &[bool], batch: usize, queries: usize) -> Self {
        let keys = key_real.len() / batch.max(1);
        let mut keep = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for _ in 0..queries {
                keep.extend_from_slice(&key_real[b * keys..(b + 1) * keys]);
            }
        }
        Self {
            batch,
            queries,
            keys,
            keep,
        }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut keep = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for q in 0..len {
                keep.extend((0..len).map(|k| k <= q));
            }
        }
        Self {
            batch,
            queries: len,
            keys: len,
            keep,
        }
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if (self.batch, self.queries, self.keys) != (other.batch, other.queries, other.keys) {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![self.batch, self.queries, self.keys],
                rhs: vec![other.batch, other.queries, other.keys],
            });
        }
        Ok(Self {
            keep: self.keep.iter().zip(&other.keep).map(|(&a, &b)| a && b).collect(),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::contract(format!("{heads} heads do not divide model dim {dim}")));
        }
        Ok(Self {
            q: LinearParams::register(store, &format!("{prefix}.q"), dim, dim, init)?,
            k: LinearParams::register(store, &format!("{prefix}.k"), dim, dim, init)?,
            v: LinearParams::register(store, &format!("{prefix}.v"), dim, dim, init)?,
            o: LinearParams::register(store, &format!("{prefix}.o"), dim, dim, init)?,
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention with `heads` heads of width `d/heads`.
    /// `query` is `[B×T_q×d]`, `memory` is `[B×T_k×d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        query: Var,
        memory: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        expect_last_dim(g, query, self.dim, "attention query")?;
        expect_last_dim(g, memory, self.dim, "attention memory")?;
        let (sq, sk) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (b, tq, tk) = (sq[0], sq[1], sk[1]);
        if (mask.batch, mask.queries, mask.keys) != (b, tq, tk) {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![b, tq, tk],
                rhs: vec![mask.batch, mask.queries, mask.keys],
            });
        }
        let (h, dh) = (self.heads, self.dim / self.heads);

        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let q = split_heads(g, q, b, tq, h, dh)?;
        let k = split_heads(g, k, b, tk, h, dh)?;
        let v = split_heads(g, v, b, tk, h, dh)?;

        let scores = g.matmul_ext(q, k, true)?;
        let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt())?;
        let mut keep = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            let rows = &mask.keep[bi * tq * tk..(bi + 1) * tq * tk];
            for _ in 0..h {
                keep.extend_from_slice(rows);
            }
        }
        let weights = g.masked_softmax(scores, &keep)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.dim])?;
        self.o.forward(g, store, ctx)
    }
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, t, h, dh])?;
    g.permute(x, &[0, 2, 1, 3])
}
