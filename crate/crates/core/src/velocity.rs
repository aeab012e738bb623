//! Stage II velocity networks.
//!
//! Every spot becomes one token: a projection of `[z_t, c_img]` plus a
//! projected time embedding, plus the spot's positional encoding when enabled.
//! An optional self-attention layer mixes the spots of one slide, and an
//! optional cross-attention layer injects the cancer type. The resulting token
//! feeds either a top-k mixture of transformer experts or one dense transformer
//! predictor.

use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{ensure, Result};
use crate::moe::{decisions_from, route_graph, GateDecision, MoeConfig};
use crate::nn::{AttentionConfig, AttentionLayer, Init, LayerNorm, Linear, PositionalEncoding, TimeEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VelocityKind {
    Moe,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityConfig {
    pub latent_dim: usize,
    /// Width of the image-feature (or toy condition) vector.
    pub cond_dim: usize,
    /// Number of cancer types; zero disables type cross-attention.
    pub n_types: usize,
    pub hidden: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub pe_enabled: bool,
    pub pe_base: f64,
    /// Shared self-attention across the spots of a slide.
    pub backbone_self_attention: bool,
    pub kind: VelocityKind,
    pub experts: usize,
    pub top_k: usize,
    pub expert_dim: usize,
    pub expert_heads: usize,
    pub ff_mult: usize,
}

impl VelocityConfig {
    /// Full-scale Stage II setting: width 256, six 4-head experts, top-2.
    pub fn histology(latent_dim: usize, cond_dim: usize, n_types: usize) -> Self {
        VelocityConfig {
            latent_dim,
            cond_dim,
            n_types,
            hidden: 256,
            heads: 4,
            time_dim: 64,
            pe_enabled: true,
            pe_base: 10_000.0,
            backbone_self_attention: true,
            kind: VelocityKind::Moe,
            experts: 6,
            top_k: 2,
            expert_dim: 256,
            expert_heads: 4,
            ff_mult: 2,
        }
    }

    /// Toy benchmark: eight single-head experts of width 32 with top-1 routing.
    pub fn toy(kind: VelocityKind) -> Self {
        VelocityConfig {
            latent_dim: 2,
            cond_dim: 2,
            n_types: 0,
            hidden: 64,
            heads: 1,
            time_dim: 16,
            pe_enabled: false,
            pe_base: 10_000.0,
            backbone_self_attention: false,
            kind,
            experts: 8,
            top_k: 1,
            expert_dim: 32,
            expert_heads: 1,
            ff_mult: 2,
        }
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            experts: self.experts,
            top_k: self.top_k,
        }
    }

    /// Width and heads of the dense predictor: as wide as all experts together.
    pub fn dense_shape(&self) -> (usize, usize) {
        (self.experts * self.expert_dim, self.experts * self.expert_heads)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_dim > 0 && self.hidden > 0, "velocity widths must be positive");
        ensure!(
            self.hidden % self.heads == 0,
            "hidden width {} not divisible by {} heads",
            self.hidden,
            self.heads
        );
        ensure!(
            !self.pe_enabled || self.hidden % 4 == 0,
            "positional encoding needs a hidden width divisible by 4"
        );
        ensure!(self.time_dim % 2 == 0 && self.time_dim > 0, "time embedding width must be even");
        self.moe().validate()
    }
}

/// Inputs for one velocity evaluation over a packed batch of spots.
#[derive(Clone, Debug)]
pub struct VelocityBatch<T> {
    pub z_t: Tensor<T>,
    pub t: Vec<f64>,
    pub cond: Tensor<T>,
    pub type_ids: Option<Vec<usize>>,
    pub coords: Option<Vec<[f64; 2]>>,
    /// Rows whose condition is replaced by the learned null embeddings.
    pub null_mask: Vec<bool>,
    /// Consecutive row ranges that attend to each other (one per slide chunk).
    pub segments: Vec<Range<usize>>,
}

impl<T: Real> VelocityBatch<T> {
    pub fn rows(&self) -> usize {
        self.z_t.rows()
    }

    /// Same inputs with every condition nulled.
    pub fn nulled(&self) -> Self {
        VelocityBatch {
            null_mask: vec![true; self.rows()],
            ..self.clone()
        }
    }

    pub fn with_state(&self, z_t: Tensor<T>, t: f64) -> Self {
        VelocityBatch {
            z_t,
            t: vec![t; self.rows()],
            ..self.clone()
        }
    }
}

/// Segments of unit length, for inputs that do not interact.
pub fn singleton_segments(n: usize) -> Vec<Range<usize>> {
    (0..n).map(|i| i..i + 1).collect()
}

#[derive(Clone, Debug)]
pub struct VelocityOutput {
    pub velocity: Var,
    /// `[batch, experts]` softmax node (MoE only).
    pub gate_probs: Option<Var>,
    /// `[batch, experts]` logits node (MoE only).
    pub gate_logits: Option<Var>,
    pub decisions: Vec<GateDecision>,
}

#[derive(Clone, Debug)]
struct Expert {
    proj: Option<Linear>,
    layer: AttentionLayer,
    ln: LayerNorm,
    out: Linear,
}

impl Expert {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let proj = (in_dim != dim).then(|| Linear::new(store, &format!("{name}.proj"), in_dim, dim, Init::FanIn, g, rng));
        let cfg = AttentionConfig {
            ff_mult,
            ..AttentionConfig::new(dim, heads)
        };
        Ok(Expert {
            proj,
            layer: AttentionLayer::new(store, &format!("{name}.layer"), cfg, g, rng)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim, g),
            out: Linear::new(store, &format!("{name}.out"), dim, out_dim, Init::FanIn, g, rng),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let h = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let (h, _) = self.layer.self_attention(g, store, h, segments)?;
        let h = self.ln.forward(g, store, h)?;
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
enum Head {
    Moe { gate: Linear, experts: Vec<Expert> },
    Dense(Expert),
}

#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub config: VelocityConfig,
    null_cond: ParamId,
    input_proj: Linear,
    time_proj: Linear,
    backbone_attn: Option<AttentionLayer>,
    type_embed: Option<Linear>,
    null_type: Option<ParamId>,
    cross_attn: Option<AttentionLayer>,
    head: Head,
}

impl VelocityNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: VelocityConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bb = ParamGroup::Backbone;
        let c = &config;
        let null_cond = store.add_uniform("vel.null_cond", &[1, c.cond_dim.max(1)], 0.02, bb, rng);
        let input_proj = Linear::new(store, "vel.input", c.latent_dim + c.cond_dim, c.hidden, Init::FanIn, bb, rng);
        let time_proj = Linear::new(store, "vel.time", c.time_dim, c.hidden, Init::FanIn, bb, rng);
        let attn_cfg = AttentionConfig {
            ff_mult: c.ff_mult,
            ..AttentionConfig::new(c.hidden, c.heads)
        };
        let backbone_attn = if c.backbone_self_attention {
            Some(AttentionLayer::new(store, "vel.self_attn", attn_cfg, bb, rng)?)
        } else {
            None
        };
        let (type_embed, null_type, cross_attn) = if c.n_types > 0 {
            (
                Some(Linear::new(store, "vel.type", c.n_types, c.hidden, Init::FanIn, bb, rng)),
                Some(store.add_uniform("vel.null_type", &[1, c.hidden], 0.02, bb, rng)),
                Some(AttentionLayer::new(store, "vel.cross_attn", attn_cfg, bb, rng)?),
            )
        } else {
            (None, None, None)
        };
        let head = match c.kind {
            VelocityKind::Moe => {
                let gate = Linear::new(store, "vel.gate", c.hidden, c.experts, Init::FanIn, ParamGroup::Gate, rng);
                let experts = (0..c.experts)
                    .map(|i| {
                        Expert::new(
                            store,
                            &format!("vel.expert{i}"),
                            c.hidden,
                            c.expert_dim,
                            c.expert_heads,
                            c.ff_mult,
                            c.latent_dim,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Head::Moe { gate, experts }
            }
            VelocityKind::Dense => {
                let (dim, heads) = c.dense_shape();
                Head::Dense(Expert::new(store, "vel.dense", c.hidden, dim, heads, c.ff_mult, c.latent_dim, rng)?)
            }
        };
        Ok(VelocityNet {
            config,
            null_cond,
            input_proj,
            time_proj,
            backbone_attn,
            type_embed,
            null_type,
            cross_attn,
            head,
        })
    }

    /// Gate parameters, if this is a mixture.
    pub fn gate_params(&self) -> Option<(ParamId, ParamId)> {
        match &self.head {
            Head::Moe { gate, .. } => Some((gate.w, gate.b)),
            Head::Dense(_) => None,
        }
    }

    fn validate_batch<T: Real>(&self, b: &VelocityBatch<T>) -> Result<()> {
        let c = &self.config;
        let n = b.rows();
        ensure!(n > 0, "velocity batch is empty");
        ensure!(b.z_t.cols() == c.latent_dim, "state width {} vs latent {}", b.z_t.cols(), c.latent_dim);
        ensure!(
            b.cond.rows() == n && b.cond.cols() == c.cond_dim,
            "condition shape {:?} vs [{n}, {}]",
            b.cond.shape(),
            c.cond_dim
        );
        ensure!(b.t.len() == n && b.null_mask.len() == n, "per-row inputs differ in length");
        for &t in &b.t {
            ensure!((0.0..=1.0).contains(&t), "time {t} outside [0, 1]");
        }
        let mut next = 0;
        for s in &b.segments {
            ensure!(s.start == next && s.end > s.start, "segments must tile the batch in order");
            next = s.end;
        }
        ensure!(next == n, "segments cover {next} of {n} rows");
        if c.n_types > 0 {
            let ids = b.type_ids.as_ref().ok_or_else(|| crate::MolfError::Contract("cancer-type ids required".into()))?;
            ensure!(ids.len() == n, "type ids length {} vs {n}", ids.len());
            ensure!(ids.iter().all(|&i| i < c.n_types), "cancer-type id out of range");
        }
        if c.pe_enabled {
            let coords = b.coords.as_ref().ok_or_else(|| crate::MolfError::Contract("spot coordinates required".into()))?;
            ensure!(coords.len() == n, "coordinates length {} vs {n}", coords.len());
        }
        Ok(())
    }

    /// Token per spot after conditioning, before the velocity head.
    fn tokens<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &VelocityBatch<T>) -> Result<Var> {
        let c = &self.config;
        let n = b.rows();
        let z = g.constant(b.z_t.clone());
        let cond = g.constant(b.cond.clone());
        let null = g.param(store, self.null_cond);
        let cond = if b.null_mask.iter().any(|&m| m) {
            g.where_rows(cond, null, &b.null_mask)?
        } else {
            cond
        };
        let zc = g.concat_cols(&[z, cond])?;
        let mut h = self.input_proj.forward(g, store, zc)?;

        let te = TimeEmbedding::new(c.time_dim);
        let mut temb = Vec::with_capacity(n * c.time_dim);
        for &t in &b.t {
            temb.extend(te.encode(t)?.into_iter().map(T::from_f64_lossy));
        }
        let temb = g.constant(Tensor::matrix(n, c.time_dim, temb)?);
        let tproj = self.time_proj.forward(g, store, temb)?;
        h = g.add(h, tproj)?;

        if c.pe_enabled {
            let pe = PositionalEncoding {
                dim: c.hidden,
                base: c.pe_base,
                enabled: true,
            };
            let coords = b.coords.as_ref().expect("validated");
            let mut data = Vec::with_capacity(n * c.hidden);
            for &xy in coords {
                data.extend(pe.encode(xy)?.into_iter().map(T::from_f64_lossy));
            }
            let pe = g.constant(Tensor::matrix(n, c.hidden, data)?);
            h = g.add(h, pe)?;
        }
        if let Some(layer) = &self.backbone_attn {
            h = layer.self_attention(g, store, h, &b.segments)?.0;
        }
        if let (Some(embed), Some(null_type), Some(cross)) = (&self.type_embed, self.null_type, &self.cross_attn) {
            let ids = b.type_ids.as_ref().expect("validated");
            let mut onehot = vec![T::zero(); n * c.n_types];
            for (r, &id) in ids.iter().enumerate() {
                onehot[r * c.n_types + id] = T::one();
            }
            let onehot = g.constant(Tensor::matrix(n, c.n_types, onehot)?);
            let ctx = embed.forward(g, store, onehot)?;
            let ctx = if b.null_mask.iter().any(|&m| m) {
                let nt = g.param(store, null_type);
                g.where_rows(ctx, nt, &b.null_mask)?
            } else {
                ctx
            };
            let per_spot = singleton_segments(n);
            h = cross.cross_attention(g, store, h, ctx, &per_spot, &per_spot)?.0;
        }
        Ok(h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: &VelocityBatch<T>) -> Result<VelocityOutput> {
        self.validate_batch(b)?;
        let h = self.tokens(g, store, b)?;
        let n = b.rows();
        match &self.head {
            Head::Dense(expert) => Ok(VelocityOutput {
                velocity: expert.forward(g, store, h, &b.segments)?,
                gate_probs: None,
                gate_logits: None,
                decisions: Vec::new(),
            }),
            Head::Moe { gate, experts } => {
                let logits = gate.forward(g, store, h)?;
                let probs = g.softmax_rows(logits);
                let (weights, selected) = route_graph(g, probs, self.config.top_k)?;
                let decisions = decisions_from(g.value(probs), g.value(weights), &selected);

                let mut seg_of = vec![0usize; n];
                for (s, r) in b.segments.iter().enumerate() {
                    for i in r.clone() {
                        seg_of[i] = s;
                    }
                }
                let mut acc: Option<Var> = None;
                for (e, expert) in experts.iter().enumerate() {
                    let mut rows = Vec::new();
                    let mut slots = Vec::new();
                    for (r, sel) in selected.iter().enumerate() {
                        if let Some(j) = sel.iter().position(|&x| x == e) {
                            rows.push(r);
                            slots.push((r, j));
                        }
                    }
                    if rows.is_empty() {
                        continue;
                    }
                    let mut segs: Vec<Range<usize>> = Vec::new();
                    for (i, &r) in rows.iter().enumerate() {
                        match segs.last_mut() {
                            Some(last) if seg_of[rows[last.start]] == seg_of[r] => last.end = i + 1,
                            _ => segs.push(i..i + 1),
                        }
                    }
                    let xe = g.gather_rows(h, &rows)?;
                    let ye = expert.forward(g, store, xe, &segs)?;
                    let we = g.pick(weights, &slots)?;
                    let yw = g.mul(ye, we)?;
                    let scattered = g.scatter_rows(yw, &rows, n)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, scattered)?,
                        None => scattered,
                    });
                }
                Ok(VelocityOutput {
                    velocity: acc.expect("every row selects at least one expert"),
                    gate_probs: Some(probs),
                    gate_logits: Some(logits),
                    decisions,
                })
            }
        }
    }

    /// Velocity values only (no gradient use).
    pub fn eval<T: Real>(&self, store: &ParamStore<T>, b: &VelocityBatch<T>) -> Result<(Tensor<T>, Vec<GateDecision>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, b)?;
        Ok((g.value(out.velocity).clone(), out.decisions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: VelocityKind) -> VelocityConfig {
        VelocityConfig {
            latent_dim: 3,
            cond_dim: 4,
            n_types: 2,
            hidden: 8,
            heads: 2,
            time_dim: 4,
            pe_enabled: true,
            pe_base: 100.0,
            backbone_self_attention: true,
            kind,
            experts: 3,
            top_k: 2,
            expert_dim: 4,
            expert_heads: 1,
            ff_mult: 1,
        }
    }

    fn batch(n: usize, seed: u64) -> VelocityBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |c: usize| {
            Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        VelocityBatch {
            z_t: m(3),
            t: (0..n).map(|i| i as f64 / n as f64).collect(),
            cond: m(4),
            type_ids: Some((0..n).map(|i| i % 2).collect()),
            coords: Some((0..n).map(|i| [i as f64, 2.0 * i as f64]).collect()),
            null_mask: vec![false; n],
            segments: vec![0..n / 2, n / 2..n],
        }
    }

    #[test]
    fn moe_output_shape_and_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let net = VelocityNet::new(&mut s, tiny(VelocityKind::Moe), &mut rng).unwrap();
        let (v, d) = net.eval(&s, &batch(6, 1)).unwrap();
        assert_eq!(v.shape(), &[6, 3]);
        assert_eq!(d.len(), 6);
        for dec in &d {
            assert_eq!(dec.k(), 2);
            assert!((dec.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((dec.full_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_is_deterministic_and_shaped() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut s = ParamStore::<f32>::new();
            let net = VelocityNet::new(&mut s, tiny(VelocityKind::Dense), &mut rng).unwrap();
            net.eval(&s, &batch(4, 2)).unwrap().0
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn toy_dense_is_eight_expert_widths() {
        let c = VelocityConfig::toy(VelocityKind::Dense);
        assert_eq!(c.dense_shape(), (256, 8));
    }

    #[test]
    fn rejects_bad_segments_and_missing_types() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let net = VelocityNet::new(&mut s, tiny(VelocityKind::Moe), &mut rng).unwrap();
        let mut b = batch(4, 3);
        b.segments = vec![0..3];
        assert!(net.eval(&s, &b).is_err());
        let mut b = batch(4, 3);
        b.type_ids = None;
        assert!(net.eval(&s, &b).is_err());
        let mut b = batch(4, 3);
        b.t[0] = 1.5;
        assert!(net.eval(&s, &b).is_err());
    }

    #[test]
    fn null_rows_ignore_their_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f32>::new();
        let mut cfg = tiny(VelocityKind::Moe);
        cfg.backbone_self_attention = false;
        let net = VelocityNet::new(&mut s, cfg, &mut rng).unwrap();
        let mut a = batch(2, 6);
        a.segments = singleton_segments(2);
        let mut b = a.clone();
        for v in b.cond.data_mut() {
            *v += 3.0;
        }
        b.type_ids = Some(vec![1, 0]);
        let va = net.eval(&s, &a.nulled()).unwrap().0;
        let vb = net.eval(&s, &b.nulled()).unwrap().0;
        assert_eq!(va, vb);
        assert_ne!(net.eval(&s, &a).unwrap().0, net.eval(&s, &b).unwrap().0);
    }

    #[test]
    fn outputs_finite_for_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::<f32>::new();
        let net = VelocityNet::new(&mut s, tiny(VelocityKind::Dense), &mut rng).unwrap();
        let mut b = batch(4, 8);
        for v in b.z_t.data_mut().iter_mut().chain(b.cond.data_mut()) {
            *v *= 10.0;
        }
        assert!(net.eval(&s, &b).unwrap().0.all_finite());
    }
}
