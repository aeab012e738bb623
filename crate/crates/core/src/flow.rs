//! Stage II: conditional flow matching in the VAE latent space.
//!
//! Pure reference versions of the path, target, terminal estimate and losses
//! sit next to the graph versions used for training.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{ensure, MolfError, Result};
use crate::moe::load_balance_graph;
use crate::vae::{gather_rows, GeneVae};
use crate::velocity::{singleton_segments, VelocityBatch, VelocityConfig, VelocityNet};

/// `(1 - t) z0 + t z1`.
pub fn ot_path<T: Real>(z0: &[T], z1: &[T], t: T) -> Result<Vec<T>> {
    ensure!(t >= T::zero() && t <= T::one(), "time {t:?} outside [0, 1]");
    ensure!(z0.len() == z1.len(), "endpoint widths {} and {} differ", z0.len(), z1.len());
    Ok(z0.iter().zip(z1).map(|(&a, &b)| (T::one() - t) * a + t * b).collect())
}

/// `z1 - z0`, the velocity of the straight path.
pub fn target_velocity<T: Real>(z0: &[T], z1: &[T]) -> Result<Vec<T>> {
    ensure!(z0.len() == z1.len(), "endpoint widths {} and {} differ", z0.len(), z1.len());
    Ok(z0.iter().zip(z1).map(|(&a, &b)| b - a).collect())
}

/// One-step extrapolation to `t = 1`: `z_t + (1 - t) v`.
pub fn terminal_estimate<T: Real>(z_t: &[T], t: T, v: &[T]) -> Result<Vec<T>> {
    ensure!(t >= T::zero() && t <= T::one(), "time {t:?} outside [0, 1]");
    ensure!(z_t.len() == v.len(), "state width {} vs velocity width {}", z_t.len(), v.len());
    Ok(z_t.iter().zip(v).map(|(&z, &u)| z + (T::one() - t) * u).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub c_img: Vec<f64>,
    /// One-hot cancer type; `None` when the task has no type.
    pub c_type: Option<Vec<f64>>,
    pub coord: [f64; 2],
    /// When set the network substitutes its learned null embeddings.
    pub is_null: bool,
}

impl ConditionBundle {
    pub fn validate(&self) -> Result<()> {
        if let (Some(ct), false) = (&self.c_type, self.is_null) {
            let ones = ct.iter().filter(|&&v| v == 1.0).count();
            let zeros = ct.iter().filter(|&&v| v == 0.0).count();
            ensure!(ones == 1 && ones + zeros == ct.len(), "cancer type must be one-hot");
        }
        Ok(())
    }

    pub fn type_id(&self) -> Option<usize> {
        self.c_type.as_ref().and_then(|ct| ct.iter().position(|&v| v == 1.0))
    }
}

/// Null the condition with probability `p_drop`.
pub fn apply_condition_dropout<R: Rng + ?Sized>(c: &ConditionBundle, p_drop: f64, rng: &mut R) -> Result<ConditionBundle> {
    ensure!((0.0..=1.0).contains(&p_drop), "dropout probability {p_drop} outside [0, 1]");
    let mut out = c.clone();
    if drop_draw(p_drop, rng) {
        out.is_null = true;
    }
    Ok(out)
}

fn drop_draw<R: Rng + ?Sized>(p_drop: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p_drop
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub t: f64,
    pub condition: ConditionBundle,
    pub x: Option<Vec<f64>>,
}

/// Mean over pairs of `|v(z_t, t, c) - (z1 - z0)|^2`.
pub fn cfm_loss<F>(pairs: &[FlowPair], mut velocity_fn: F) -> Result<f64>
where
    F: FnMut(&[f64], f64, &ConditionBundle) -> Result<Vec<f64>>,
{
    ensure!(!pairs.is_empty(), "flow-matching loss over an empty batch");
    let mut total = 0.0;
    for p in pairs {
        let zt = ot_path(&p.z0, &p.z1, p.t)?;
        let u = target_velocity(&p.z0, &p.z1)?;
        let v = velocity_fn(&zt, p.t, &p.condition)?;
        ensure!(v.len() == u.len(), "velocity width {} vs latent {}", v.len(), u.len());
        total += v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub flow: f64,
    pub gene: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            flow: 1.0,
            gene: 1.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_flow", self.flow), ("lambda_gene", self.gene), ("lambda_aux", self.aux)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MolfError::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cfm: f64,
    pub gene: f64,
    pub aux: f64,
    pub total: f64,
}

/// A VAE decoder whose parameters must stay fixed.
#[derive(Clone, Copy, Debug)]
pub struct Decoder<'a, T> {
    pub vae: &'a GeneVae,
    pub store: &'a ParamStore<T>,
}

/// `|x - f(z_hat)|^2` averaged over rows. Gradients reach `z_hat` only.
pub fn gene_consistency_graph<T: Real>(g: &mut Graph<T>, x: Var, z_hat: Var, decoder: &Decoder<T>) -> Result<Var> {
    ensure!(decoder.store.is_frozen(), "gene-consistency loss needs a frozen decoder");
    let recon = decoder.vae.decode_graph(g, decoder.store, z_hat)?;
    let diff = g.sub(x, recon)?;
    let sq = g.square(diff);
    let rows = g.value(x).rows();
    let s = g.sum(sq);
    Ok(g.scale(s, T::from_f64_lossy(1.0 / rows as f64)))
}

/// Graph version of [`terminal_estimate`] for a batch; `t` holds one time per row.
pub fn terminal_graph<T: Real>(g: &mut Graph<T>, z_t: Var, t: &[f64], v: Var) -> Result<Var> {
    let col: Vec<T> = t.iter().map(|&t| T::from_f64_lossy(1.0 - t)).collect();
    let col = g.constant(Tensor::matrix(t.len(), 1, col)?);
    let step = g.mul(v, col)?;
    g.add(z_t, step)
}

/// Everything needed for one loss evaluation.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    /// Inputs at `z_t`; `velocity.z_t` is already the interpolated state.
    pub velocity: VelocityBatch<T>,
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
    pub x: Option<Tensor<T>>,
}

impl<T: Real> FlowBatch<T> {
    /// Builds the interpolated state from `z0`, `z1` and `velocity.t`.
    pub fn new(mut velocity: VelocityBatch<T>, z0: Tensor<T>, z1: Tensor<T>, x: Option<Tensor<T>>) -> Result<Self> {
        ensure!(z0.shape() == z1.shape(), "endpoint shapes {:?} and {:?} differ", z0.shape(), z1.shape());
        ensure!(velocity.t.len() == z0.rows(), "one time per row required");
        let d = z0.cols();
        let mut zt = Vec::with_capacity(z0.numel());
        for (r, &t) in velocity.t.iter().enumerate() {
            let row = ot_path(z0.row_slice(r), z1.row_slice(r), T::from_f64_lossy(t))?;
            zt.extend(row);
        }
        velocity.z_t = Tensor::matrix(z0.rows(), d, zt)?;
        if let Some(x) = &x {
            ensure!(x.rows() == z0.rows(), "expression rows {} vs batch {}", x.rows(), z0.rows());
        }
        Ok(FlowBatch { velocity, z0, z1, x })
    }

    pub fn rows(&self) -> usize {
        self.z0.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cfm: Var,
    pub gene: Option<Var>,
    pub aux: Option<Var>,
}

impl LossTerms {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64_lossy());
        LossBreakdown {
            cfm: val(Some(self.cfm)),
            gene: val(self.gene),
            aux: val(self.aux),
            total: val(Some(self.total)),
        }
    }
}

/// `lambda_flow L_CFM + lambda_gene L_gene + lambda_aux L_aux` on one batch.
///
/// The gene term is skipped when `decoder` is `None` or the batch carries no
/// expression targets; the auxiliary term exists only for mixture networks.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    net: &VelocityNet,
    store: &ParamStore<T>,
    batch: &FlowBatch<T>,
    decoder: Option<&Decoder<T>>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let n = batch.rows();
    let out = net.forward(g, store, &batch.velocity)?;
    let mut target = batch.z1.clone();
    for (t, &a) in target.data_mut().iter_mut().zip(batch.z0.data()) {
        *t = *t - a;
    }
    let target = g.constant(target);
    let diff = g.sub(out.velocity, target)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    let cfm = g.scale(s, T::from_f64_lossy(1.0 / n as f64));
    let mut total = g.scale(cfm, T::from_f64_lossy(weights.flow));

    let gene = match (decoder, &batch.x) {
        (Some(dec), Some(x)) => {
            let zt = g.constant(batch.velocity.z_t.clone());
            let z_hat = terminal_graph(g, zt, &batch.velocity.t, out.velocity)?;
            let xv = g.constant(x.clone());
            let l = gene_consistency_graph(g, xv, z_hat, dec)?;
            let w = g.scale(l, T::from_f64_lossy(weights.gene));
            total = g.add(total, w)?;
            Some(l)
        }
        _ => None,
    };
    let aux = match out.gate_probs {
        Some(p) => {
            let l = load_balance_graph(g, p)?;
            let w = g.scale(l, T::from_f64_lossy(weights.aux));
            total = g.add(total, w)?;
            Some(l)
        }
        None => None,
    };
    Ok(LossTerms { total, cfm, gene, aux })
}

/// Rows of Stage II training data, grouped into slides.
#[derive(Clone, Debug)]
pub struct FlowDataset {
    pub z1: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub type_ids: Option<Vec<usize>>,
    pub coords: Option<Vec<[f64; 2]>>,
    /// Expression targets for the gene-consistency term.
    pub x: Option<Tensor<f32>>,
    /// Consecutive row ranges, one per slide.
    pub slides: Vec<Range<usize>>,
}

impl FlowDataset {
    pub fn rows(&self) -> usize {
        self.z1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        ensure!(n > 0, "flow dataset is empty");
        ensure!(self.cond.rows() == n, "condition rows {} vs {n}", self.cond.rows());
        if let Some(t) = &self.type_ids {
            ensure!(t.len() == n, "type ids {} vs {n}", t.len());
        }
        if let Some(c) = &self.coords {
            ensure!(c.len() == n, "coordinates {} vs {n}", c.len());
        }
        if let Some(x) = &self.x {
            ensure!(x.rows() == n, "expression rows {} vs {n}", x.rows());
        }
        let mut next = 0;
        for s in &self.slides {
            ensure!(s.start == next && s.end > s.start, "slides must tile the rows in order");
            next = s.end;
        }
        ensure!(next == n, "slides cover {next} of {n} rows");
        Ok(())
    }

    pub fn slide_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.rows()];
        for (s, r) in self.slides.iter().enumerate() {
            for i in r.clone() {
                out[i] = s;
            }
        }
        out
    }

    /// Rows in the given order; consecutive rows from one slide share a segment.
    pub fn subset(&self, rows: &[usize]) -> FlowDataset {
        let slide_of = self.slide_of();
        let mut slides: Vec<Range<usize>> = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            match slides.last_mut() {
                Some(last) if slide_of[rows[last.start]] == slide_of[r] => last.end = i + 1,
                _ => slides.push(i..i + 1),
            }
        }
        FlowDataset {
            z1: gather_rows(&self.z1, rows),
            cond: gather_rows(&self.cond, rows),
            type_ids: self.type_ids.as_ref().map(|t| rows.iter().map(|&r| t[r]).collect()),
            coords: self.coords.as_ref().map(|c| rows.iter().map(|&r| c[r]).collect()),
            x: self.x.as_ref().map(|x| gather_rows(x, rows)),
            slides,
        }
    }

    /// Velocity inputs for the given rows at `z_t`, `t`.
    pub fn velocity_batch(
        &self,
        rows: &[usize],
        z_t: Tensor<f32>,
        t: Vec<f64>,
        null_mask: Vec<bool>,
        segments: Vec<Range<usize>>,
    ) -> VelocityBatch<f32> {
        VelocityBatch {
            z_t,
            t,
            cond: gather_rows(&self.cond, rows),
            type_ids: self.type_ids.as_ref().map(|v| rows.iter().map(|&r| v[r]).collect()),
            coords: self.coords.as_ref().map(|v| rows.iter().map(|&r| v[r]).collect()),
            null_mask,
            segments,
        }
    }

    /// Training batch with fresh `z0`, uniform `t` and condition dropout.
    pub fn flow_batch<R: Rng + ?Sized>(
        &self,
        rows: &[usize],
        segments: Vec<Range<usize>>,
        p_drop: f64,
        rng: &mut R,
    ) -> Result<FlowBatch<f32>> {
        let n = rows.len();
        let d = self.z1.cols();
        let z0 = standard_normal(n, d, rng);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<bool> = (0..n).map(|_| drop_draw(p_drop, rng)).collect();
        let vb = self.velocity_batch(rows, Tensor::zeros(&[n, d]), t, mask, segments);
        FlowBatch::new(vb, z0, gather_rows(&self.z1, rows), self.x.as_ref().map(|x| gather_rows(x, rows)))
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Latent targets for Stage II: the posterior mean, or a posterior sample.
pub fn encode_targets(
    vae: &GeneVae,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    sample_seed: Option<u64>,
) -> Result<Tensor<f32>> {
    let Some(seed) = sample_seed else {
        return vae.encode_mean(store, x);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let post = vae.encode(store, x)?;
    let d = vae.config.latent_dim;
    let mut out = Vec::with_capacity(post.len() * d);
    for p in post {
        let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        out.extend(crate::vae::reparameterize(&p, &noise)?.into_iter().map(|v| v as f32));
    }
    Tensor::matrix(x.rows(), d, out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batching {
    /// One step per slide; slides longer than `cap` are split into random chunks.
    Slides { cap: usize },
    /// Independent rows drawn with replacement.
    Rows { batch_size: usize, steps_per_epoch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub p_drop: f64,
    pub batching: Batching,
    pub val_fraction: f64,
    /// Upper bound on validation rows (rows mode only).
    pub val_cap: usize,
    pub seed: u64,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        FlowTrainOptions {
            epochs: 500,
            patience: 50,
            lr: 5e-5,
            gate_lr: 1e-5,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            p_drop: 0.1,
            batching: Batching::Slides { cap: 1024 },
            val_fraction: 0.1,
            val_cap: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedFlow {
    pub net: VelocityNet,
    pub store: ParamStore<f32>,
    pub log: Vec<FlowEpochRecord>,
    pub best_epoch: usize,
}

pub fn loss_log_csv(log: &[FlowEpochRecord]) -> String {
    let mut s = String::from("epoch,L_CFM,L_gene,L_aux,total,val_total\n");
    for r in log {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train.cfm, r.train.gene, r.train.aux, r.train.total, r.val_total
        ));
    }
    s
}

fn segments_for(data: &FlowDataset, rows: &[usize], batching: &Batching) -> Vec<Range<usize>> {
    match batching {
        Batching::Rows { .. } => singleton_segments(rows.len()),
        Batching::Slides { .. } => data.subset(rows).slides,
    }
}

fn epoch_batches(slides: &[Range<usize>], batching: &Batching, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match batching {
        Batching::Rows {
            batch_size,
            steps_per_epoch,
        } => {
            let n: usize = slides.iter().map(|s| s.len()).sum();
            (0..*steps_per_epoch)
                .map(|_| (0..*batch_size).map(|_| rng.random_range(0..n)).collect())
                .collect()
        }
        Batching::Slides { cap } => {
            let mut out = Vec::new();
            let mut order: Vec<usize> = (0..slides.len()).collect();
            order.shuffle(rng);
            for s in order {
                let mut rows: Vec<usize> = slides[s].clone().collect();
                if rows.len() > *cap {
                    rows.shuffle(rng);
                    for c in rows.chunks(*cap) {
                        let mut c = c.to_vec();
                        c.sort_unstable();
                        out.push(c);
                    }
                } else {
                    out.push(rows);
                }
            }
            out
        }
    }
}

/// Train a velocity network with early stopping on a held-out split.
///
/// The gene-consistency term is active when `lambda_gene > 0` and the dataset
/// carries expression targets; it then requires the frozen Stage I model.
pub fn train_flow(
    data: &FlowDataset,
    config: VelocityConfig,
    vae: Option<(&GeneVae, &ParamStore<f32>)>,
    opts: &FlowTrainOptions,
) -> Result<TrainedFlow> {
    data.validate()?;
    opts.weights.validate()?;
    ensure!((0.0..=1.0).contains(&opts.p_drop), "dropout probability {} outside [0, 1]", opts.p_drop);
    ensure!(
        data.z1.cols() == config.latent_dim && data.cond.cols() == config.cond_dim,
        "dataset widths do not match the velocity config"
    );
    let gene_active = opts.weights.gene > 0.0 && data.x.is_some();
    let decoder = match (gene_active, vae) {
        (false, _) => None,
        (true, None) => {
            return Err(MolfError::Config(
                "gene-consistency loss needs a trained Stage I checkpoint".into(),
            ))
        }
        (true, Some((vae, store))) => {
            ensure!(store.is_frozen(), "Stage I parameters must be frozen");
            Some(Decoder { vae, store })
        }
    };
    match &opts.batching {
        Batching::Slides { cap } => ensure!(*cap > 0, "slide chunk cap must be positive"),
        Batching::Rows {
            batch_size,
            steps_per_epoch,
        } => ensure!(*batch_size > 0 && *steps_per_epoch > 0, "batch size and steps must be positive"),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let net = VelocityNet::new(&mut store, config, &mut rng)?;

    let (mut train_rows, mut val_rows) = crate::vae::split_train_val(data.rows(), opts.val_fraction, &mut rng);
    train_rows.sort_unstable();
    val_rows.sort_unstable();
    if matches!(opts.batching, Batching::Rows { .. }) {
        val_rows.truncate(opts.val_cap.max(1));
    }
    let train = data.subset(&train_rows);
    let val = data.subset(&val_rows);

    // A fixed validation draw keeps epochs comparable.
    let mut val_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_f10e);
    let val_batches: Vec<FlowBatch<f32>> = epoch_batches(&val.slides, &Batching::Slides { cap: usize::MAX }, &mut val_rng)
        .into_iter()
        .flat_map(|rows| {
            let chunk = match opts.batching {
                Batching::Rows { batch_size, .. } => batch_size,
                Batching::Slides { cap } => cap,
            };
            rows.chunks(chunk).map(|c| c.to_vec()).collect::<Vec<_>>()
        })
        .map(|rows| {
            let segs = segments_for(&val, &rows, &opts.batching);
            val.flow_batch(&rows, segs, 0.0, &mut val_rng)
        })
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: opts.lr,
            gate_lr: opts.gate_lr,
            weight_decay: opts.weight_decay,
            ..AdamWConfig::default()
        },
        &store,
    );
    let mut best = (f64::INFINITY, store.clone(), 0usize);
    let mut since_best = 0usize;
    let mut log = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut acc = LossBreakdown::default();
        let mut seen = 0usize;
        for rows in epoch_batches(&train.slides, &opts.batching, &mut rng) {
            let segs = segments_for(&train, &rows, &opts.batching);
            let batch = train.flow_batch(&rows, segs, opts.p_drop, &mut rng)?;
            let mut g = Graph::new();
            let terms = total_loss_graph(&mut g, &net, &store, &batch, decoder.as_ref(), &opts.weights)?;
            let b = terms.breakdown(&g);
            let grads = g
                .backward(terms.total)
                .map_err(|e| MolfError::Numeric(format!("flow training diverged at epoch {epoch}: {e}")))?;
            let grads = grads.for_store(&store);
            opt.step(&mut store, &grads)?;
            let w = rows.len() as f64;
            acc.cfm += b.cfm * w;
            acc.gene += b.gene * w;
            acc.aux += b.aux * w;
            acc.total += b.total * w;
            seen += rows.len();
        }
        let s = seen.max(1) as f64;
        let train_b = LossBreakdown {
            cfm: acc.cfm / s,
            gene: acc.gene / s,
            aux: acc.aux / s,
            total: acc.total / s,
        };
        let mut val_total = 0.0;
        let mut val_seen = 0usize;
        for batch in &val_batches {
            let mut g = Graph::new();
            let terms = total_loss_graph(&mut g, &net, &store, batch, decoder.as_ref(), &opts.weights)?;
            val_total += g.value(terms.total).item() as f64 * batch.rows() as f64;
            val_seen += batch.rows();
        }
        let val_total = val_total / val_seen.max(1) as f64;
        if !val_total.is_finite() {
            return Err(MolfError::Numeric(format!("flow validation loss is non-finite at epoch {epoch}")));
        }
        log.push(FlowEpochRecord {
            epoch,
            train: train_b,
            val_total,
        });
        if val_total < best.0 {
            best = (val_total, store.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > opts.patience {
                break;
            }
        }
    }
    let (_, store, best_epoch) = best;
    Ok(TrainedFlow {
        net,
        store,
        log,
        best_epoch,
    })
}
