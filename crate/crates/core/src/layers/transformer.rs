use super::{AttentionMask, AttentionParams, Initializer, LayerNormParams, LinearParams};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl FeedForward {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::register(store, &format!("{prefix}.fc1"), dim, hidden, init)?,
            fc2: LinearParams::register(store, &format!("{prefix}.fc2"), hidden, dim, init)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm encoder block: `x + SelfAttn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::register(store, &format!("{prefix}.self_attn"), dim, heads, init)?,
            norm1: LayerNormParams::register(store, &format!("{prefix}.norm1"), dim)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), dim, ffn_dim, init)?,
            norm2: LayerNormParams::register(store, &format!("{prefix}.norm2"), dim)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.self_attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder output, then the feed-forward sublayer, each residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
    pub norm3: LayerNormParams,
}

impl DecoderLayer {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::register(store, &format!("{prefix}.self_attn"), dim, heads, init)?,
            norm1: LayerNormParams::register(store, &format!("{prefix}.norm1"), dim)?,
            cross_attn: AttentionParams::register(store, &format!("{prefix}.cross_attn"), dim, heads, init)?,
            norm2: LayerNormParams::register(store, &format!("{prefix}.norm2"), dim)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), dim, ffn_dim, init)?,
            norm3: LayerNormParams::register(store, &format!("{prefix}.norm3"), dim)?,
        })
    }

    /// `self_mask` is `[B×T_y×T_y]` (causal), `cross_mask` is `[B×T_y×T_x]`
    /// (encoder key padding).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        y: Var,
        enc_out: Var,
        self_mask: &AttentionMask,
        cross_mask: &AttentionMask,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, y)?;
        let h = self.self_attn.forward(g, store, h, h, self_mask)?;
        let y = g.add(y, h)?;
        let h = self.norm2.forward(g, store, y)?;
        let h = self.cross_attn.forward(g, store, h, enc_out, cross_mask)?;
        let y = g.add(y, h)?;
        let h = self.norm3.forward(g, store, y)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(y, h)
    }
}
