//! Stage I: a transformer encoder and MLP decoder over log1p expression
//! vectors, trained with a beta-weighted ELBO and then frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{ensure, MolfError, Result};
use crate::nn::{AttentionConfig, AttentionLayer, Init, LayerNorm, Linear, Mlp};

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub gene_dim: usize,
    pub latent_dim: usize,
    /// Number of chunks the expression vector is split into.
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// KL weight.
    pub beta: f64,
    /// Hidden widths of the decoder MLP.
    pub decoder_hidden: Vec<usize>,
    pub decoder_zero_init: bool,
}

impl VaeConfig {
    /// Full-scale architecture: one layer, 4 heads, width 512, latent 128.
    pub fn full_scale(gene_dim: usize) -> Self {
        VaeConfig {
            gene_dim,
            latent_dim: 128,
            tokens: 8,
            hidden: 512,
            heads: 4,
            layers: 1,
            beta: 1e-3,
            decoder_hidden: vec![512, 512],
            decoder_zero_init: false,
        }
    }

    pub fn token_width(&self) -> usize {
        self.gene_dim.div_ceil(self.tokens)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.gene_dim > 0 && self.latent_dim > 0, "VAE dimensions must be positive");
        ensure!(self.tokens > 0, "VAE needs at least one token");
        ensure!(self.tokens * self.token_width() >= self.gene_dim, "tokens do not cover the gene panel");
        ensure!(self.beta >= 0.0, "beta must be non-negative, got {}", self.beta);
        ensure!(
            self.heads > 0 && self.hidden % self.heads == 0,
            "hidden width {} not divisible by {} heads",
            self.hidden,
            self.heads
        );
        Ok(())
    }
}

/// Diagonal Gaussian posterior for one expression vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `z = mu + sigma * noise`.
pub fn reparameterize(p: &PosteriorParams, noise: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        noise.len() == p.mu.len() && p.sigma.len() == p.mu.len(),
        "reparameterize: noise length {} vs latent {}",
        noise.len(),
        p.mu.len()
    );
    Ok(p.mu
        .iter()
        .zip(&p.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_to_standard_normal(p: &PosteriorParams) -> Result<f64> {
    ensure!(p.mu.len() == p.sigma.len(), "posterior mu/sigma lengths differ");
    let mut kl = 0.0;
    for (&m, &s) in p.mu.iter().zip(&p.sigma) {
        ensure!(s > 0.0, "sigma must be positive, got {s}");
        kl += m * m + s * s - 1.0 - 2.0 * s.ln();
    }
    Ok(0.5 * kl)
}

/// Mean squared reconstruction error plus `beta` times the KL term.
pub fn vae_loss(x: &[f64], reconstruction: &[f64], p: &PosteriorParams, beta: f64) -> Result<f64> {
    ensure!(beta >= 0.0, "beta must be non-negative, got {beta}");
    ensure!(
        x.len() == reconstruction.len() && !x.is_empty(),
        "reconstruction length {} vs input {}",
        reconstruction.len(),
        x.len()
    );
    let mse = x
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    Ok(mse + beta * kl_to_standard_normal(p)?)
}

/// Graph form of the batch KL: mean over rows of the per-row KL.
pub fn kl_graph<T: Real>(g: &mut Graph<T>, mu: Var, log_sigma: Var) -> Result<Var> {
    let rows = g.value(mu).rows();
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_sigma, T::from_f64_lossy(2.0));
    let var = g.exp(two_ls);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_ls)?;
    let c = g.add_scalar(b, -T::one());
    let s = g.sum(c);
    Ok(g.scale(s, T::from_f64_lossy(0.5 / rows as f64)))
}

/// Graph form of the reparameterization with a constant noise matrix.
pub fn reparameterize_graph<T: Real>(g: &mut Graph<T>, mu: Var, sigma: Var, noise: Tensor<T>) -> Result<Var> {
    let e = g.constant(noise);
    let se = g.mul(sigma, e)?;
    g.add(mu, se)
}

/// Mean of squared differences over every element.
pub fn mse_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    ensure!(
        g.value(a).shape() == g.value(b).shape(),
        "mse: shapes {:?} vs {:?}",
        g.value(a).shape(),
        g.value(b).shape()
    );
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Graph nodes produced by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct GeneVae {
    pub config: VaeConfig,
    token_proj: Linear,
    token_pos: ParamId,
    layers: Vec<AttentionLayer>,
    ln_out: LayerNorm,
    mu_head: Linear,
    log_sigma_head: Linear,
    decoder: Mlp,
}

impl GeneVae {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let h = config.hidden;
        let token_proj = Linear::new(store, "vae.enc.token", config.token_width(), h, Init::FanIn, g, rng);
        let token_pos = store.add_uniform("vae.enc.pos", &[config.tokens, h], 0.02, g, rng);
        let layers = (0..config.layers)
            .map(|i| {
                AttentionLayer::new(
                    store,
                    &format!("vae.enc.layer{i}"),
                    AttentionConfig::new(h, config.heads),
                    g,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, "vae.enc.ln_out", h, g);
        let mu_head = Linear::new(store, "vae.enc.mu", h, config.latent_dim, Init::FanIn, g, rng);
        let log_sigma_head = Linear::new(store, "vae.enc.log_sigma", h, config.latent_dim, Init::FanIn, g, rng);
        let mut widths = vec![config.latent_dim];
        widths.extend(&config.decoder_hidden);
        widths.push(config.gene_dim);
        let last = if config.decoder_zero_init { Init::Zero } else { Init::FanIn };
        let decoder = Mlp::new(store, "vae.dec", &widths, last, g, rng);
        Ok(GeneVae {
            config,
            token_proj,
            token_pos,
            layers,
            ln_out,
            mu_head,
            log_sigma_head,
            decoder,
        })
    }

    /// Encode a `[batch, gene_dim]` node.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<EncodedBatch> {
        let c = &self.config;
        let (b, d) = (g.value(x).rows(), g.value(x).cols());
        ensure!(d == c.gene_dim, "expression length {d} does not match gene panel {}", c.gene_dim);
        let width = c.token_width();
        let pad = c.tokens * width - d;
        let xp = if pad > 0 {
            let z = g.constant(Tensor::zeros(&[b, pad]));
            g.concat_cols(&[x, z])?
        } else {
            x
        };
        let chunks = g.reshape(xp, b * c.tokens, width)?;
        let tok = self.token_proj.forward(g, store, chunks)?;
        let pos = g.param(store, self.token_pos);
        let pos = g.repeat_rows(pos, b);
        let mut h = g.add(tok, pos)?;
        let segments: Vec<_> = (0..b).map(|i| i * c.tokens..(i + 1) * c.tokens).collect();
        for layer in &self.layers {
            h = layer.self_attention(g, store, h, &segments)?.0;
        }
        let pooled = g.mean_pool(h, c.tokens)?;
        let pooled = self.ln_out.forward(g, store, pooled)?;
        let mu = self.mu_head.forward(g, store, pooled)?;
        let raw = self.log_sigma_head.forward(g, store, pooled)?;
        let log_sigma = g.clamp(raw, T::from_f64_lossy(LOG_SIGMA_MIN), T::from_f64_lossy(LOG_SIGMA_MAX));
        let sigma = g.exp(log_sigma);
        Ok(EncodedBatch { mu, log_sigma, sigma })
    }

    /// Decode a `[batch, latent_dim]` node to the mean reconstruction.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        ensure!(
            g.value(z).cols() == self.config.latent_dim,
            "latent length {} does not match {}",
            g.value(z).cols(),
            self.config.latent_dim
        );
        self.decoder.forward(g, store, z)
    }

    /// Encode a batch of expression vectors; one posterior per row.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<PosteriorParams>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = self.encode_graph(&mut g, store, xv)?;
        let mu = g.value(enc.mu);
        let sigma = g.value(enc.sigma);
        Ok((0..mu.rows())
            .map(|r| PosteriorParams {
                mu: mu.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect(),
                sigma: sigma.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect())
    }

    /// Posterior means as a `[batch, latent_dim]` tensor.
    pub fn encode_mean<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = self.encode_graph(&mut g, store, xv)?;
        Ok(g.value(enc.mu).clone())
    }

    pub fn decode<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, store, zv)?;
        Ok(g.value(out).clone())
    }

    /// Training objective on a batch with fixed reparameterization noise.
    /// With `noise = None` the posterior mean is decoded.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        noise: Option<Tensor<T>>,
    ) -> Result<Var> {
        let xv = g.constant(x.clone());
        let enc = self.encode_graph(g, store, xv)?;
        let z = match noise {
            Some(n) => reparameterize_graph(g, enc.mu, enc.sigma, n)?,
            None => enc.mu,
        };
        let recon = self.decode_graph(g, store, z)?;
        let mse = mse_graph(g, xv, recon)?;
        let kl = kl_graph(g, enc.mu, enc.log_sigma)?;
        let kl = g.scale(kl, T::from_f64_lossy(self.config.beta));
        g.add(mse, kl)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainOptions {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of rows held out for early stopping; with fewer than two rows
    /// the training rows double as validation rows.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        VaeTrainOptions {
            epochs: 1000,
            patience: 50,
            batch_size: 64,
            lr: 5e-5,
            weight_decay: 0.01,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trained and frozen Stage I model.
#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub vae: GeneVae,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub(crate) fn gather_rows<T: Real>(data: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = data.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(data.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, out).expect("row gather keeps width")
}

pub(crate) fn split_train_val(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n < 2 || n_val == 0 || n_val >= n {
        return (idx.clone(), idx);
    }
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn eval_loss(vae: &GeneVae, store: &ParamStore<f32>, data: &Tensor<f32>, rows: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in rows.chunks(batch) {
        let x = gather_rows(data, chunk);
        let mut g = Graph::new();
        let l = vae.loss_graph(&mut g, store, &x, None)?;
        total += g.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Train on `data` (`[spots, gene_dim]`, log1p values) with AdamW and early
/// stopping on the held-out loss. Returns the best-validation parameters, frozen.
pub fn train_vae(data: &Tensor<f32>, config: VaeConfig, opts: &VaeTrainOptions) -> Result<TrainedVae> {
    ensure!(data.rows() > 0, "cannot train the VAE on an empty dataset");
    ensure!(
        data.cols() == config.gene_dim,
        "dataset has {} genes, config expects {}",
        data.cols(),
        config.gene_dim
    );
    ensure!(opts.batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let vae = GeneVae::new(&mut store, config, &mut rng)?;
    let (train, val) = split_train_val(data.rows(), opts.val_fraction, &mut rng);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: opts.weight_decay,
            ..AdamWConfig::with_lr(opts.lr)
        },
        &store,
    );

    let mut best = (f64::INFINITY, store.clone(), 0usize);
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut order = train.clone();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let x = gather_rows(data, chunk);
            let noise = normal_tensor(chunk.len(), vae.config.latent_dim, &mut rng);
            let mut g = Graph::new();
            let loss = vae.loss_graph(&mut g, &store, &x, Some(noise))?;
            train_total += g.value(loss).item() as f64 * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let grads = grads.for_store(&store);
            opt.step(&mut store, &grads)?;
        }
        let val_loss = eval_loss(&vae, &store, data, &val, opts.batch_size)?;
        if !val_loss.is_finite() {
            return Err(MolfError::Numeric(format!("VAE validation loss is non-finite at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, store.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > opts.patience {
                break;
            }
        }
    }
    let (_, mut store, best_epoch) = best;
    store.freeze();
    Ok(TrainedVae {
        vae,
        store,
        history,
        best_epoch,
    })
}
