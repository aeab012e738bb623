//! Pre-norm transformer layer usable for self- or cross-attention.

use std::ops::Range;

use rand::Rng;

use super::linear::{Init, LayerNorm, Linear, Mlp};
use crate::autodiff::{Graph, ParamGroup, ParamStore, Real, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `dim`.
    pub ff_mult: usize,
    /// Zero-initialise the output projection and the last feed-forward layer,
    /// so a fresh layer is the identity map.
    pub zero_init_residual: bool,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        AttentionConfig {
            dim,
            heads,
            ff_mult: 2,
            zero_init_residual: true,
        }
    }
}

/// `x + O(attn(LN x))` followed by `x + FF(LN x)`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub ln_attn: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
}

impl AttentionLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AttentionConfig,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let AttentionConfig { dim, heads, .. } = config;
        ensure!(
            heads > 0 && dim % heads == 0,
            "model width {dim} is not divisible by {heads} heads"
        );
        let out_init = if config.zero_init_residual {
            Init::Zero
        } else {
            Init::FanIn
        };
        let hidden = dim * config.ff_mult.max(1);
        Ok(AttentionLayer {
            config,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, group),
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, Init::FanIn, group, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, Init::FanIn, group, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, Init::FanIn, group, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, out_init, group, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim, group),
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, hidden, dim], out_init, group, rng),
        })
    }

    /// Self-attention within each segment of rows.
    pub fn self_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        segments: &[Range<usize>],
    ) -> Result<(Var, Var)> {
        self.check_width(g, x)?;
        let h = self.ln_attn.forward(g, store, x)?;
        let attn = self.attend(g, store, h, h, segments, segments)?;
        self.finish(g, store, x, attn)
    }

    /// Rows of `queries` in `q_seg[s]` attend to rows of `context` in `ctx_seg[s]`.
    ///
    /// The context is projected without normalization.
    pub fn cross_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        q_seg: &[Range<usize>],
        ctx_seg: &[Range<usize>],
    ) -> Result<(Var, Var)> {
        self.check_width(g, queries)?;
        self.check_width(g, context)?;
        ensure!(g.value(context).rows() > 0, "cross-attention over an empty context");
        let h = self.ln_attn.forward(g, store, queries)?;
        let attn = self.attend(g, store, h, context, q_seg, ctx_seg)?;
        self.finish(g, store, queries, attn)
    }

    fn check_width<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        ensure!(
            g.value(x).cols() == self.config.dim,
            "attention layer of width {} got tokens of width {}",
            self.config.dim,
            g.value(x).cols()
        );
        Ok(())
    }

    fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        ctx: Var,
        q_seg: &[Range<usize>],
        kv_seg: &[Range<usize>],
    ) -> Result<Var> {
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, ctx)?;
        let v = self.wv.forward(g, store, ctx)?;
        g.attention(q, k, v, self.config.heads, q_seg, kv_seg)
    }

    /// Returns the layer output and the raw attention node (for inspecting weights).
    fn finish<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        attn: Var,
    ) -> Result<(Var, Var)> {
        let o = self.wo.forward(g, store, attn)?;
        let x = g.add(x, o)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        Ok((g.add(x, f)?, attn))
    }
}
