//! Synthetic linear-Gaussian histology fixture and the end-to-end check.
//!
//! Each spot draws latent factors `f ~ N(0, I)`. Expression is
//! `max(0, A f + b + shift[type] + noise)` and image features are
//! `B f + noise`, so features carry the information needed to predict
//! expression. The noise control replaces features with independent noise
//! and drops the type shift, leaving nothing to learn.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::config::KvMap;
use crate::dataio::{
    load_checkpoint, load_dataset, read_manifest, save_checkpoint, write_manifest, write_tensor, Dataset,
    DatasetManifest, SlideEntry, Stage, ValueKind, MANIFEST_VERSION,
};
use crate::error::{MolfError, Result};
use crate::metrics::pearson_per_gene;
use crate::pipeline::{
    expression_rows, flow_from_checkpoint, predict, run_train_flow, run_train_vae, split_spots, vae_from_checkpoint,
    velocity_inputs, RunConfig,
};
use crate::selection::{filter_and_rank, sweep_cfg, SelectionResult};
use crate::flow::Decoder;

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureConfig {
    pub slides: usize,
    /// Spots lie on a `grid_w x grid_h` grid per slide.
    pub grid_w: usize,
    pub grid_h: usize,
    pub genes: usize,
    pub feature_dim: usize,
    pub factors: usize,
    pub expr_noise: f64,
    pub feature_noise: f64,
    pub type_shift: f64,
    /// Features independent of expression.
    pub control: bool,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            slides: 3,
            grid_w: 12,
            grid_h: 10,
            genes: 48,
            feature_dim: 16,
            factors: 4,
            expr_noise: 0.15,
            feature_noise: 0.1,
            type_shift: 0.3,
            control: false,
            seed: 0,
        }
    }
}

impl FixtureConfig {
    pub fn spots_per_slide(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn cancer_type(&self, slide: usize) -> String {
        if self.control {
            "CTRL".to_string()
        } else {
            format!("TYPE{}", slide % 2)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.slides == 0 || self.spots_per_slide() == 0 || self.genes == 0 || self.feature_dim == 0 || self.factors == 0
        {
            return Err(MolfError::Config("fixture dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| normal(rng) * scale).collect()
}

/// Write slide matrices and `manifest.txt` into `dir`; returns the manifest path.
pub fn write_fixture(dir: &Path, cfg: &FixtureConfig) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| MolfError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (g, k, d) = (cfg.genes, cfg.factors, cfg.feature_dim);
    let a = gaussian_matrix(g, k, 1.0 / (k as f64).sqrt(), &mut rng);
    let bias: Vec<f64> = (0..g).map(|_| 1.0 + 0.5 * rng.random::<f64>()).collect();
    let b = gaussian_matrix(d, k, 1.0 / (k as f64).sqrt(), &mut rng);
    let shifts: Vec<Vec<f64>> = (0..2).map(|_| gaussian_matrix(1, g, cfg.type_shift, &mut rng)).collect();
    let n = cfg.spots_per_slide();
    let mut slides = Vec::new();
    for s in 0..cfg.slides {
        let mut expr = Vec::with_capacity(n * g);
        let mut feat = Vec::with_capacity(n * d);
        let mut coords = Vec::with_capacity(n * 2);
        for i in 0..n {
            let f: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            for j in 0..g {
                let mut v = bias[j] + normal(&mut rng) * cfg.expr_noise;
                v += (0..k).map(|q| a[j * k + q] * f[q]).sum::<f64>();
                if !cfg.control {
                    v += shifts[s % 2][j];
                }
                expr.push(v.max(0.0) as f32);
            }
            for j in 0..d {
                let v = if cfg.control {
                    normal(&mut rng)
                } else {
                    (0..k).map(|q| b[j * k + q] * f[q]).sum::<f64>() + normal(&mut rng) * cfg.feature_noise
                };
                feat.push(v as f32);
            }
            coords.push((i % cfg.grid_w) as f32);
            coords.push((i / cfg.grid_w) as f32);
        }
        let name = format!("slide{s}");
        let entry = SlideEntry {
            name: name.clone(),
            spots: n,
            cancer_type: cfg.cancer_type(s),
            expression: PathBuf::from(format!("{name}.expr.molf")),
            features: PathBuf::from(format!("{name}.feat.molf")),
            coords: PathBuf::from(format!("{name}.coord.molf")),
        };
        write_tensor(dir.join(&entry.expression), &Tensor::matrix(n, g, expr)?)?;
        write_tensor(dir.join(&entry.features), &Tensor::matrix(n, d, feat)?)?;
        write_tensor(dir.join(&entry.coords), &Tensor::matrix(n, 2, coords)?)?;
        slides.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        feature_dim: d,
        values: ValueKind::Log1p,
        genes: (0..g).map(|j| format!("G{j:03}")).collect(),
        slides,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.txt");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

/// Model sizes and budgets small enough for the fixture to train in seconds.
pub fn fixture_overrides() -> KvMap {
    let text = "\
vae.latent_dim=8
vae.tokens=2
vae.hidden=32
vae.heads=2
vae.decoder_hidden=64
vae.epochs=150
vae.patience=30
vae.batch=32
vae.lr=0.002
flow.hidden=32
flow.heads=2
flow.time_dim=16
flow.experts=4
flow.top_k=2
flow.expert_dim=32
flow.expert_heads=2
flow.epochs=150
flow.patience=40
flow.lr=0.002
flow.chunk_cap=64
sample.steps=4
";
    KvMap::parse(text).expect("static config parses")
}

/// Attach the failing stage to an error, keeping its kind.
pub fn in_stage(stage: &str, e: MolfError) -> MolfError {
    match e {
        MolfError::Contract(m) => MolfError::Contract(format!("{stage}: {m}")),
        MolfError::Numeric(m) => MolfError::Numeric(format!("{stage}: {m}")),
        MolfError::Config(m) => MolfError::Config(format!("{stage}: {m}")),
        MolfError::Validation(m) => MolfError::Validation(format!("{stage}: {m}")),
        MolfError::Corrupt { path, reason } => MolfError::Corrupt {
            path,
            reason: format!("{stage}: {reason}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct EndToEndReport {
    pub selection: SelectionResult,
    /// Mean per-gene PCC of held-out predictions.
    pub pcc: f64,
    /// Same predictions scored against spot-shuffled truth.
    pub shuffled_pcc: f64,
    pub vae_checksum_stable: bool,
}

impl EndToEndReport {
    pub fn gap(&self) -> f64 {
        self.pcc - self.shuffled_pcc
    }
}

fn mean_pcc(truth: &Tensor<f32>, pred: &Tensor<f32>) -> Result<f64> {
    pearson_per_gene(truth, pred)?
        .mean
        .ok_or_else(|| MolfError::Numeric("PCC undefined for every gene".into()))
}

/// train-vae, train-flow, sweep-cfg on validation spots, select-cfg, then
/// eval on test spots at the selected scale. Checkpoints go to `work`.
pub fn end_to_end_check(manifest: &Path, work: &Path, overrides: &KvMap, scales: &[f64]) -> Result<EndToEndReport> {
    let m = read_manifest(manifest).map_err(|e| in_stage("load", e))?;
    let ds: Dataset = load_dataset(&m).map_err(|e| in_stage("load", e))?;
    let cfg = RunConfig::from_kv(overrides, ds.genes.len(), ds.features.cols(), ds.vocabulary.len())?;
    let split = split_spots(&ds.slides, cfg.split_val, cfg.split_test, cfg.seed);
    std::fs::create_dir_all(work).map_err(|e| MolfError::io(work, e))?;

    let vae_path = work.join("vae.ckpt");
    let stage = run_train_vae(&ds, &split.train, &cfg).map_err(|e| in_stage("train-vae", e))?;
    save_checkpoint(&stage.checkpoint, &vae_path).map_err(|e| in_stage("train-vae", e))?;
    let vae_ckpt = load_checkpoint(&vae_path)
        .and_then(|c| c.expect_stage(Stage::Vae))
        .map_err(|e| in_stage("train-flow", e))?;
    let (vae, vae_store) = vae_from_checkpoint(&vae_ckpt).map_err(|e| in_stage("train-flow", e))?;
    let before = vae_store.checksum();

    let flow_path = work.join("flow.ckpt");
    let flow = run_train_flow(&ds, &split.train, &vae, &vae_store, &cfg).map_err(|e| in_stage("train-flow", e))?;
    save_checkpoint(&flow.checkpoint, &flow_path).map_err(|e| in_stage("train-flow", e))?;
    let vae_checksum_stable = vae_store.checksum() == before
        && load_checkpoint(&vae_path).map(|c| c.params.checksum() == before).unwrap_or(false);

    let flow_ckpt = load_checkpoint(&flow_path).map_err(|e| in_stage("sweep-cfg", e))?;
    let (net, store) = flow_from_checkpoint(&flow_ckpt).map_err(|e| in_stage("sweep-cfg", e))?;
    let inputs = velocity_inputs(&ds, &split.val, net.config.latent_dim);
    let ids: Vec<u64> = split.val.iter().map(|&r| r as u64).collect();
    let dec = Decoder { vae: &vae, store: &vae_store };
    let table = sweep_cfg(
        scales,
        &net,
        &store,
        &inputs,
        &ids,
        &expression_rows(&ds, &split.val),
        Some(&dec),
        cfg.seed,
        cfg.sample_steps,
    )
    .map_err(|e| in_stage("sweep-cfg", e))?;
    let selection = filter_and_rank(&table, cfg.tau).map_err(|e| in_stage("select-cfg", e))?;

    let out = predict(&ds, &split.test, &net, &store, &vae, &vae_store, selection.w, cfg.sample_steps, cfg.seed)
        .map_err(|e| in_stage("eval", e))?;
    let pred = out.expression.expect("decoder given");
    let truth = expression_rows(&ds, &split.test);
    let pcc = mean_pcc(&truth, &pred).map_err(|e| in_stage("eval", e))?;
    let mut perm = split.test.clone();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x50ff1e));
    let shuffled_pcc = mean_pcc(&expression_rows(&ds, &perm), &pred).map_err(|e| in_stage("eval", e))?;
    Ok(EndToEndReport {
        selection,
        pcc,
        shuffled_pcc,
        vae_checksum_stable,
    })
}
