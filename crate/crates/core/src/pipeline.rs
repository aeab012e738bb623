//! Stage runners shared by the command line and the end-to-end check:
//! spot splits, training both stages into checkpoints, rebuilding networks
//! from checkpoints, and prediction.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::{vae_config_from_kv, vae_config_to_kv, velocity_config_from_kv, velocity_config_to_kv, KvMap};
use crate::dataio::{Checkpoint, Dataset, Stage};
use crate::error::{ensure, MolfError, Result};
use crate::flow::{encode_targets, loss_log_csv, train_flow, Batching, Decoder, FlowDataset, FlowTrainOptions, LossWeights};
use crate::sampler::{generate, Generated, SampleRequest};
use crate::vae::{train_vae, EpochRecord, GeneVae, VaeConfig, VaeTrainOptions};
use crate::velocity::{VelocityBatch, VelocityConfig, VelocityKind, VelocityNet};

/// Every tunable of a run. Defaults are the full-scale training setup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub split_val: f64,
    pub split_test: f64,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainOptions,
    pub velocity: VelocityConfig,
    pub flow_train: FlowTrainOptions,
    /// Use a posterior sample instead of the mean as the Stage II target.
    pub z1_sample: bool,
    pub sample_w: f64,
    pub sample_steps: usize,
    pub tau: f64,
}

impl RunConfig {
    /// Defaults for a dataset shape; `overrides` may change any field.
    pub fn from_kv(overrides: &KvMap, gene_dim: usize, cond_dim: usize, n_types: usize) -> Result<Self> {
        let m = overrides;
        let seed = m.get_or("seed", 0u64)?;
        let full = VaeConfig::full_scale(gene_dim);
        let vae = VaeConfig {
            gene_dim,
            latent_dim: m.get_or("vae.latent_dim", full.latent_dim)?,
            tokens: m.get_or("vae.tokens", full.tokens)?,
            hidden: m.get_or("vae.hidden", full.hidden)?,
            heads: m.get_or("vae.heads", full.heads)?,
            layers: m.get_or("vae.layers", full.layers)?,
            beta: m.get_or("vae.beta", full.beta)?,
            decoder_hidden: m.list_or("vae.decoder_hidden", full.decoder_hidden)?,
            decoder_zero_init: m.bool_or("vae.decoder_zero_init", full.decoder_zero_init)?,
        };
        vae.validate().map_err(|e| MolfError::Config(format!("vae: {e}")))?;
        let vd = VaeTrainOptions::default();
        let vae_train = VaeTrainOptions {
            epochs: m.get_or("vae.epochs", vd.epochs)?,
            patience: m.get_or("vae.patience", vd.patience)?,
            batch_size: m.get_or("vae.batch", vd.batch_size)?,
            lr: m.get_or("vae.lr", vd.lr)?,
            weight_decay: m.get_or("vae.weight_decay", vd.weight_decay)?,
            val_fraction: m.get_or("vae.val_fraction", vd.val_fraction)?,
            seed,
        };
        let h = VelocityConfig::histology(vae.latent_dim, cond_dim, n_types);
        let moe = m.bool_or("flow.moe", true)?;
        let velocity = VelocityConfig {
            latent_dim: vae.latent_dim,
            cond_dim,
            n_types,
            hidden: m.get_or("flow.hidden", h.hidden)?,
            heads: m.get_or("flow.heads", h.heads)?,
            time_dim: m.get_or("flow.time_dim", h.time_dim)?,
            pe_enabled: m.bool_or("flow.pe", h.pe_enabled)?,
            pe_base: m.get_or("flow.pe_base", h.pe_base)?,
            backbone_self_attention: m.bool_or("flow.self_attention", h.backbone_self_attention)?,
            kind: if moe { VelocityKind::Moe } else { VelocityKind::Dense },
            experts: m.get_or("flow.experts", h.experts)?,
            top_k: m.get_or("flow.top_k", h.top_k)?,
            expert_dim: m.get_or("flow.expert_dim", h.expert_dim)?,
            expert_heads: m.get_or("flow.expert_heads", h.expert_heads)?,
            ff_mult: m.get_or("flow.ff_mult", h.ff_mult)?,
        };
        velocity.validate().map_err(|e| MolfError::Config(format!("flow: {e}")))?;
        let fd = FlowTrainOptions::default();
        let flow_train = FlowTrainOptions {
            epochs: m.get_or("flow.epochs", fd.epochs)?,
            patience: m.get_or("flow.patience", fd.patience)?,
            lr: m.get_or("flow.lr", fd.lr)?,
            gate_lr: m.get_or("flow.gate_lr", fd.gate_lr)?,
            weight_decay: m.get_or("flow.weight_decay", fd.weight_decay)?,
            weights: LossWeights {
                flow: m.get_or("flow.lambda_flow", 1.0)?,
                gene: m.get_or("flow.lambda_gene", 1.0)?,
                aux: m.get_or("flow.lambda_aux", 1.0)?,
            },
            p_drop: m.get_or("flow.p_drop", fd.p_drop)?,
            batching: Batching::Slides {
                cap: m.get_or("flow.chunk_cap", 1024usize)?,
            },
            val_fraction: m.get_or("flow.val_fraction", fd.val_fraction)?,
            val_cap: fd.val_cap,
            seed,
        };
        flow_train.weights.validate()?;
        let z1_sample = match m.get_or("flow.z1", "mean".to_string())?.as_str() {
            "mean" => false,
            "sample" => true,
            other => return Err(MolfError::Config(format!("field `flow.z1`: expected mean or sample, got `{other}`"))),
        };
        let c = RunConfig {
            seed,
            split_val: m.get_or("split.val", 0.15)?,
            split_test: m.get_or("split.test", 0.15)?,
            vae,
            vae_train,
            velocity,
            flow_train,
            z1_sample,
            sample_w: m.get_or("sample.w", 1.0)?,
            sample_steps: m.get_or("sample.steps", 1usize)?,
            tau: m.get_or("select.tau", 0.05)?,
        };
        if !(c.split_val >= 0.0 && c.split_test >= 0.0 && c.split_val + c.split_test < 1.0) {
            return Err(MolfError::Config("fields `split.val` and `split.test` must leave training spots".into()));
        }
        if c.sample_steps == 0 {
            return Err(MolfError::Config("field `sample.steps` must be at least 1".into()));
        }
        if !(c.sample_w >= 0.0) {
            return Err(MolfError::Config("field `sample.w` must be non-negative".into()));
        }
        Ok(c)
    }

    /// Every field as `key=value`, in a form [`RunConfig::from_kv`] reads back.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("seed", self.seed);
        m.set("split.val", self.split_val);
        m.set("split.test", self.split_test);
        vae_config_to_kv(&self.vae, &mut m);
        m.set("vae.epochs", self.vae_train.epochs);
        m.set("vae.patience", self.vae_train.patience);
        m.set("vae.batch", self.vae_train.batch_size);
        m.set("vae.lr", self.vae_train.lr);
        m.set("vae.weight_decay", self.vae_train.weight_decay);
        m.set("vae.val_fraction", self.vae_train.val_fraction);
        velocity_config_to_kv(&self.velocity, &mut m);
        m.set("flow.moe", self.velocity.kind == VelocityKind::Moe);
        let f = &self.flow_train;
        m.set("flow.epochs", f.epochs);
        m.set("flow.patience", f.patience);
        m.set("flow.lr", f.lr);
        m.set("flow.gate_lr", f.gate_lr);
        m.set("flow.weight_decay", f.weight_decay);
        m.set("flow.lambda_flow", f.weights.flow);
        m.set("flow.lambda_gene", f.weights.gene);
        m.set("flow.lambda_aux", f.weights.aux);
        m.set("flow.p_drop", f.p_drop);
        if let Batching::Slides { cap } = f.batching {
            m.set("flow.chunk_cap", cap);
        }
        m.set("flow.val_fraction", f.val_fraction);
        m.set("flow.z1", if self.z1_sample { "sample" } else { "mean" });
        m.set("sample.w", self.sample_w);
        m.set("sample.steps", self.sample_steps);
        m.set("select.tau", self.tau);
        m
    }
}

/// Spot indices of each split, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<Vec<usize>> {
        match name {
            "train" => Ok(self.train.clone()),
            "val" => Ok(self.val.clone()),
            "test" => Ok(self.test.clone()),
            "all" => {
                let mut all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
                all.sort_unstable();
                Ok(all)
            }
            other => Err(MolfError::Config(format!("unknown split `{other}` (train, val, test, all)"))),
        }
    }
}

/// Random per-slide split of spots into train, validation and test.
pub fn split_spots(slides: &[Range<usize>], val: f64, test: f64, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000);
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in slides {
        let mut idx: Vec<usize> = r.clone().collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (n as f64 * val).round() as usize;
        let n_test = ((n as f64 * test).round() as usize).min(n - n_val.min(n));
        s.val.extend(&idx[..n_val.min(n)]);
        s.test.extend(&idx[n_val.min(n)..n_val.min(n) + n_test]);
        s.train.extend(&idx[n_val.min(n) + n_test..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    s
}

/// Consecutive runs of rows from the same slide.
pub fn segments_for(slides: &[Range<usize>], rows: &[usize]) -> Vec<Range<usize>> {
    let slide_of = |r: usize| slides.iter().position(|s| s.contains(&r)).unwrap_or(usize::MAX);
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut prev = usize::MAX;
    for (i, &r) in rows.iter().enumerate() {
        let s = slide_of(r);
        match out.last_mut() {
            Some(last) if s == prev => last.end = i + 1,
            _ => out.push(i..i + 1),
        }
        prev = s;
    }
    out
}

fn gather(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let c = t.cols();
    let data = rows.iter().flat_map(|&r| t.row_slice(r).iter().copied()).collect();
    Tensor::matrix(rows.len(), c, data).expect("sized")
}

pub fn expression_rows(ds: &Dataset, rows: &[usize]) -> Tensor<f32> {
    gather(&ds.expression, rows)
}

/// Conditioning inputs for the given spots; `z_t` and `t` are placeholders.
pub fn velocity_inputs(ds: &Dataset, rows: &[usize], latent_dim: usize) -> VelocityBatch<f32> {
    VelocityBatch {
        z_t: Tensor::zeros(&[rows.len(), latent_dim]),
        t: vec![0.0; rows.len()],
        cond: gather(&ds.features, rows),
        type_ids: Some(rows.iter().map(|&r| ds.type_ids[r]).collect()),
        coords: Some(rows.iter().map(|&r| ds.coords[r]).collect()),
        null_mask: vec![false; rows.len()],
        segments: segments_for(&ds.slides, rows),
    }
}

pub struct VaeStage {
    pub checkpoint: Checkpoint,
    pub vae: GeneVae,
    pub history: Vec<EpochRecord>,
}

pub fn vae_log_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

pub fn run_train_vae(ds: &Dataset, rows: &[usize], cfg: &RunConfig) -> Result<VaeStage> {
    ensure!(!rows.is_empty(), "no training spots");
    let x = expression_rows(ds, rows);
    let trained = train_vae(&x, cfg.vae.clone(), &cfg.vae_train)?;
    let mut config = cfg.to_kv();
    config.set("data.genes", ds.genes.len());
    Ok(VaeStage {
        checkpoint: Checkpoint {
            stage: Stage::Vae,
            config,
            params: trained.store,
        },
        vae: trained.vae,
        history: trained.history,
    })
}

/// Rebuild the frozen Stage I model.
pub fn vae_from_checkpoint(ckpt: &Checkpoint) -> Result<(GeneVae, ParamStore<f32>)> {
    if ckpt.stage != Stage::Vae {
        return Err(MolfError::Config(format!("expected a vae checkpoint, found a {} checkpoint", ckpt.stage)));
    }
    let config = vae_config_from_kv(&ckpt.config)?;
    let mut store = ParamStore::new();
    let vae = GeneVae::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_from(&ckpt.params)?;
    store.freeze();
    Ok((vae, store))
}

pub struct FlowStage {
    pub checkpoint: Checkpoint,
    pub net: VelocityNet,
    pub log_csv: String,
}

pub fn run_train_flow(
    ds: &Dataset,
    rows: &[usize],
    vae: &GeneVae,
    vae_store: &ParamStore<f32>,
    cfg: &RunConfig,
) -> Result<FlowStage> {
    ensure!(!rows.is_empty(), "no training spots");
    ensure!(
        vae.config.gene_dim == ds.genes.len(),
        "Stage I model has {} genes, dataset has {}",
        vae.config.gene_dim,
        ds.genes.len()
    );
    let x = expression_rows(ds, rows);
    let z1 = encode_targets(vae, vae_store, &x, cfg.z1_sample.then_some(cfg.seed))?;
    let inputs = velocity_inputs(ds, rows, vae.config.latent_dim);
    let data = FlowDataset {
        z1,
        cond: inputs.cond,
        type_ids: inputs.type_ids,
        coords: inputs.coords,
        x: Some(x),
        slides: inputs.segments,
    };
    let mut vcfg = cfg.velocity.clone();
    vcfg.latent_dim = vae.config.latent_dim;
    let trained = train_flow(&data, vcfg.clone(), Some((vae, vae_store)), &cfg.flow_train)?;
    let mut config = cfg.to_kv();
    velocity_config_to_kv(&vcfg, &mut config);
    config.set("data.vocabulary", ds.vocabulary.join(","));
    config.set("flow.best_epoch", trained.best_epoch);
    Ok(FlowStage {
        checkpoint: Checkpoint {
            stage: Stage::Flow,
            config,
            params: trained.store,
        },
        net: trained.net,
        log_csv: loss_log_csv(&trained.log),
    })
}

pub fn flow_from_checkpoint(ckpt: &Checkpoint) -> Result<(VelocityNet, ParamStore<f32>)> {
    if ckpt.stage != Stage::Flow {
        return Err(MolfError::Config(format!("expected a flow checkpoint, found a {} checkpoint", ckpt.stage)));
    }
    let config = velocity_config_from_kv(&ckpt.config)?;
    let mut store = ParamStore::new();
    let net = VelocityNet::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_from(&ckpt.params)?;
    Ok((net, store))
}

/// Cancer-type vocabulary recorded in a flow checkpoint.
pub fn checkpoint_vocabulary(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.config
        .raw("data.vocabulary")
        .map(|v| v.split(',').map(str::to_string).collect())
        .unwrap_or_default()
}

/// Generate expression for the given spots; spot ids are dataset row indices.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    ds: &Dataset,
    rows: &[usize],
    net: &VelocityNet,
    store: &ParamStore<f32>,
    vae: &GeneVae,
    vae_store: &ParamStore<f32>,
    w: f64,
    steps: usize,
    seed: u64,
) -> Result<Generated> {
    let inputs = velocity_inputs(ds, rows, net.config.latent_dim);
    let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    let dec = Decoder { vae, store: vae_store };
    generate(&SampleRequest { w, steps, seed }, net, store, &inputs, &ids, Some(&dec))
}
