//! Conditional eight-Gaussian benchmark.
//!
//! The condition is `[cos theta, sin theta]`, the mode is `floor(4 theta / pi)`
//! and the target is drawn around the mode mean on a ring of radius `R`.
//! Flow matching runs directly in the 2-D target space.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{ensure, MolfError, Result};
use crate::flow::{train_flow, Batching, FlowDataset, FlowTrainOptions, LossWeights};
use crate::metrics::{w2_per_dimension, W2Report};
use crate::moe::{load_balance_loss, GateDecision};
use crate::sampler::{generate, SampleRequest};
use crate::velocity::{singleton_segments, VelocityBatch, VelocityConfig, VelocityKind};

pub const MODES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySample {
    pub theta: f64,
    pub condition: [f64; 2],
    pub mode: usize,
    pub target: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub radius: f64,
    pub variance: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub lambda_aux: f64,
    /// Guidance scale at evaluation.
    pub w: f64,
    pub p_drop: f64,
    pub sample_steps: usize,
    pub moe: VelocityConfig,
    pub dense: VelocityConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            radius: 3.0,
            variance: 0.01,
            train_samples: 50_000,
            eval_samples: 8_000,
            epochs: 200,
            steps_per_epoch: 10,
            batch_size: 256,
            lr: 1e-3,
            gate_lr: 1e-5,
            lambda_aux: 1.0,
            w: 1.0,
            p_drop: 0.0,
            sample_steps: 16,
            moe: VelocityConfig::toy(VelocityKind::Moe),
            dense: VelocityConfig::toy(VelocityKind::Dense),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.radius > 0.0 && self.variance > 0.0, "radius and variance must be positive");
        ensure!(self.train_samples > 1 && self.eval_samples > 0, "sample counts must be positive");
        ensure!(self.sample_steps >= 1, "sampling needs at least one step");
        Ok(())
    }

    pub fn mode_mean(&self, k: usize) -> [f64; 2] {
        let a = k as f64 * PI / 4.0;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    /// Report header lines describing the run budget.
    pub fn describe(&self) -> String {
        format!(
            "radius={} variance={} train_samples={} eval_samples={} steps={} batch={} lr={} gate_lr={} lambda_aux={} w={} p_drop={} sample_steps={}",
            self.radius,
            self.variance,
            self.train_samples,
            self.eval_samples,
            self.epochs * self.steps_per_epoch,
            self.batch_size,
            self.lr,
            self.gate_lr,
            self.lambda_aux,
            self.w,
            self.p_drop,
            self.sample_steps
        )
    }
}

pub fn mode_of(theta: f64) -> usize {
    ((4.0 * theta / PI).floor() as usize).min(MODES - 1)
}

/// Draw a target for a given angle.
pub fn gen_toy_sample_at<R: Rng + ?Sized>(theta: f64, rng: &mut R, config: &ToyConfig) -> ToySample {
    let mode = mode_of(theta);
    let mu = config.mode_mean(mode);
    let sd = config.variance.sqrt();
    let e0: f64 = rng.sample(StandardNormal);
    let e1: f64 = rng.sample(StandardNormal);
    ToySample {
        theta,
        condition: [theta.cos(), theta.sin()],
        mode,
        target: [mu[0] + sd * e0, mu[1] + sd * e1],
    }
}

pub fn gen_toy_sample<R: Rng + ?Sized>(rng: &mut R, config: &ToyConfig) -> ToySample {
    let theta = rng.random::<f64>() * 2.0 * PI;
    gen_toy_sample_at(theta, rng, config)
}

pub fn gen_toy_dataset(n: usize, seed: u64, config: &ToyConfig) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_toy_sample(&mut rng, config)).collect()
}

pub fn samples_csv(samples: &[ToySample]) -> String {
    let mut s = String::from("theta,c0,c1,mode,x,y\n");
    for t in samples {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            t.theta, t.condition[0], t.condition[1], t.mode, t.target[0], t.target[1]
        )
        .unwrap();
    }
    s
}

fn to_tensor(samples: &[ToySample], f: impl Fn(&ToySample) -> [f64; 2]) -> Tensor<f32> {
    let data = samples.iter().flat_map(|s| f(s).map(|v| v as f32)).collect();
    Tensor::matrix(samples.len(), 2, data).expect("sized")
}

pub fn flow_dataset(samples: &[ToySample]) -> FlowDataset {
    FlowDataset {
        z1: to_tensor(samples, |s| s.target),
        cond: to_tensor(samples, |s| s.condition),
        type_ids: None,
        coords: None,
        x: None,
        slides: vec![0..samples.len()],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurityReport {
    /// `[expert][mode]` sample counts.
    pub counts: Vec<[usize; MODES]>,
    /// Mean over populated modes of the largest per-expert share.
    pub purity: f64,
    pub active_experts: usize,
    /// Set when every sample went to one expert.
    pub degenerate: bool,
}

pub fn mode_purity(decisions: &[GateDecision], modes: &[usize], experts: usize) -> Result<PurityReport> {
    ensure!(decisions.len() == modes.len(), "{} decisions for {} samples", decisions.len(), modes.len());
    let mut counts = vec![[0usize; MODES]; experts];
    for (d, &m) in decisions.iter().zip(modes) {
        ensure!(d.k() == 1, "mode purity needs top-1 routing, got k = {}", d.k());
        ensure!(m < MODES, "mode {m} out of range");
        let e = d.expert_indices[0];
        ensure!(e < experts, "expert {e} out of range");
        counts[e][m] += 1;
    }
    let mut total = 0.0;
    let mut populated = 0;
    for m in 0..MODES {
        let col: usize = counts.iter().map(|c| c[m]).sum();
        if col == 0 {
            continue;
        }
        let max = counts.iter().map(|c| c[m]).max().unwrap_or(0);
        total += max as f64 / col as f64;
        populated += 1;
    }
    let active_experts = counts.iter().filter(|c| c.iter().sum::<usize>() > 0).count();
    Ok(PurityReport {
        counts,
        purity: if populated == 0 { 0.0 } else { total / populated as f64 },
        active_experts,
        degenerate: active_experts == 1,
    })
}

/// `std / mean` of the batch-summed gate probabilities.
pub fn importance_cv(decisions: &[GateDecision]) -> Result<f64> {
    let rows: Vec<Vec<f64>> = decisions.iter().map(|d| d.full_probs.clone()).collect();
    Ok(load_balance_loss(&rows)?.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyModel {
    Moe,
    Dense,
}

impl ToyModel {
    pub fn as_str(self) -> &'static str {
        match self {
            ToyModel::Moe => "moe",
            ToyModel::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyRun {
    pub model: ToyModel,
    pub seed: u64,
    pub w2: W2Report,
    pub importance_cv: Option<f64>,
    pub purity: Option<PurityReport>,
    pub first_epoch_cfm: f64,
    pub last_epoch_cfm: f64,
    /// Generated `[x, y]` per evaluation sample.
    pub generated: Vec<[f64; 2]>,
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x0e7a_1c0d_e5ee_d000
}

/// Evaluation conditions and held-out targets for a seed.
pub fn eval_set(seed: u64, config: &ToyConfig) -> Vec<ToySample> {
    gen_toy_dataset(config.eval_samples, eval_seed(seed), config)
}

/// Train one model on the seed's data and evaluate it. With `epochs = 0` the
/// freshly initialised network is evaluated.
pub fn run_toy_model(config: &ToyConfig, model: ToyModel, seed: u64) -> Result<ToyRun> {
    config.validate()?;
    let train = gen_toy_dataset(config.train_samples, seed, config);
    let data = flow_dataset(&train);
    let vconf = match model {
        ToyModel::Moe => config.moe.clone(),
        ToyModel::Dense => config.dense.clone(),
    };
    let opts = FlowTrainOptions {
        epochs: config.epochs,
        patience: usize::MAX,
        lr: config.lr,
        gate_lr: config.gate_lr,
        weights: LossWeights {
            flow: 1.0,
            gene: 0.0,
            aux: config.lambda_aux,
        },
        p_drop: config.p_drop,
        batching: Batching::Rows {
            batch_size: config.batch_size,
            steps_per_epoch: config.steps_per_epoch,
        },
        val_fraction: 0.02,
        val_cap: 1024,
        seed,
        ..FlowTrainOptions::default()
    };
    let trained = if config.epochs == 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = crate::autodiff::ParamStore::new();
        let net = crate::velocity::VelocityNet::new(&mut store, vconf, &mut rng)?;
        crate::flow::TrainedFlow {
            net,
            store,
            log: Vec::new(),
            best_epoch: 0,
        }
    } else {
        train_flow(&data, vconf, None, &opts).map_err(|e| match e {
            MolfError::Numeric(m) => MolfError::Numeric(format!("seed {seed}: {m}")),
            other => other,
        })?
    };

    let eval = eval_set(seed, config);
    let n = eval.len();
    let inputs = VelocityBatch {
        z_t: Tensor::zeros(&[n, 2]),
        t: vec![0.0; n],
        cond: to_tensor(&eval, |s| s.condition),
        type_ids: None,
        coords: None,
        null_mask: vec![false; n],
        segments: singleton_segments(n),
    };
    let ids: Vec<u64> = (0..n as u64).collect();
    let req = SampleRequest {
        w: config.w,
        steps: config.sample_steps,
        seed: eval_seed(seed),
    };
    let out = generate(&req, &trained.net, &trained.store, &inputs, &ids, None)?;
    if !out.latent.all_finite() {
        return Err(MolfError::Numeric(format!("seed {seed}: generated samples are non-finite")));
    }
    let truth = to_tensor(&eval, |s| s.target);
    let w2 = w2_per_dimension(&truth, &out.latent)?;
    let (importance_cv, purity) = if out.initial_routing.is_empty() {
        (None, None)
    } else {
        let modes: Vec<usize> = eval.iter().map(|s| s.mode).collect();
        let purity = if out.initial_routing[0].k() == 1 {
            Some(mode_purity(&out.initial_routing, &modes, trained.net.config.experts)?)
        } else {
            None
        };
        (Some(importance_cv(&out.initial_routing)?), purity)
    };
    let generated = (0..n)
        .map(|r| {
            let row = out.latent.row_slice(r);
            [row[0] as f64, row[1] as f64]
        })
        .collect();
    Ok(ToyRun {
        model,
        seed,
        w2,
        importance_cv,
        purity,
        first_epoch_cfm: trained.log.first().map_or(f64::NAN, |r| r.train.cfm),
        last_epoch_cfm: trained.log.last().map_or(f64::NAN, |r| r.train.cfm),
        generated,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub runs: Vec<ToyRun>,
}

impl ToyReport {
    pub fn runs_of(&self, model: ToyModel) -> impl Iterator<Item = &ToyRun> {
        self.runs.iter().filter(move |r| r.model == model)
    }

    /// Medians over seeds of Dim-1, Dim-2 and the average.
    pub fn median_w2(&self, model: ToyModel) -> [f64; 3] {
        let col = |f: &dyn Fn(&ToyRun) -> f64| median(&self.runs_of(model).map(f).collect::<Vec<_>>());
        [
            col(&|r| r.w2.per_dim[0]),
            col(&|r| r.w2.per_dim[1]),
            col(&|r| r.w2.average),
        ]
    }

    /// Table with one row per model and seed plus a median row per model.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,seed,dim1,dim2,average,importance_cv,purity\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.runs {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model.as_str(),
                r.seed,
                r.w2.per_dim[0],
                r.w2.per_dim[1],
                r.w2.average,
                opt(r.importance_cv),
                opt(r.purity.as_ref().map(|p| p.purity))
            )
            .unwrap();
        }
        for model in [ToyModel::Moe, ToyModel::Dense] {
            if self.runs_of(model).next().is_none() {
                continue;
            }
            let m = self.median_w2(model);
            writeln!(s, "{},median,{},{},{},,", model.as_str(), m[0], m[1], m[2]).unwrap();
        }
        s
    }

    /// Generated and held-out points for external plotting.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("source,seed,index,theta,mode,x,y\n");
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        for seed in seeds {
            for (i, t) in eval_set(seed, &self.config).iter().enumerate() {
                writeln!(s, "truth,{seed},{i},{},{},{},{}", t.theta, t.mode, t.target[0], t.target[1]).unwrap();
            }
        }
        for r in &self.runs {
            let eval = eval_set(r.seed, &self.config);
            for (i, (p, t)) in r.generated.iter().zip(&eval).enumerate() {
                writeln!(s, "{},{},{i},{},{},{},{}", r.model.as_str(), r.seed, t.theta, t.mode, p[0], p[1]).unwrap();
            }
        }
        s
    }
}

/// Train and evaluate the mixture and the dense baseline on every seed.
pub fn run_toy_benchmark(config: &ToyConfig, seeds: &[u64]) -> Result<ToyReport> {
    ensure!(!seeds.is_empty(), "toy benchmark needs at least one seed");
    let mut runs = Vec::new();
    for &seed in seeds {
        for model in [ToyModel::Moe, ToyModel::Dense] {
            runs.push(run_toy_model(config, model, seed)?);
        }
    }
    Ok(ToyReport {
        config: config.clone(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_angles() {
        let c = ToyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gen_toy_sample_at(0.0, &mut rng, &c);
        assert_eq!(s.condition, [1.0, 0.0]);
        assert_eq!(s.mode, 0);
        assert_eq!(c.mode_mean(0), [3.0, 0.0]);
        let s = gen_toy_sample_at(PI, &mut rng, &c);
        assert_eq!(s.mode, 4);
        assert!((s.condition[0] + 1.0).abs() < 1e-15 && s.condition[1].abs() < 1e-15);
        let m = c.mode_mean(4);
        assert!((m[0] + 3.0).abs() < 1e-15 && m[1].abs() < 1e-15);
    }

    #[test]
    fn mode_map_has_eight_pieces() {
        let mut changes = 0;
        let mut prev = mode_of(0.0);
        for i in 1..8000 {
            let m = mode_of(i as f64 / 8000.0 * 2.0 * PI);
            if m != prev {
                changes += 1;
                assert_eq!(m, prev + 1);
            }
            prev = m;
        }
        assert_eq!(changes, 7);
    }

    #[test]
    fn mode_means_on_ring() {
        let c = ToyConfig::default();
        for k in 0..MODES {
            let m = c.mode_mean(k);
            assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 3.0).abs() < 1e-12);
        }
    }

    fn one_hot(e: usize) -> GateDecision {
        let mut p = vec![0.0; 8];
        p[e] = 1.0;
        GateDecision {
            expert_indices: vec![e],
            weights: vec![1.0],
            full_probs: p,
        }
    }

    #[test]
    fn purity_cases() {
        let modes: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let perfect: Vec<GateDecision> = modes.iter().map(|&m| one_hot(m)).collect();
        let r = mode_purity(&perfect, &modes, 8).unwrap();
        assert_eq!(r.purity, 1.0);
        assert_eq!(r.active_experts, 8);
        let collapsed: Vec<GateDecision> = modes.iter().map(|_| one_hot(0)).collect();
        let r = mode_purity(&collapsed, &modes, 8).unwrap();
        assert_eq!(r.purity, 1.0);
        assert!(r.degenerate);
        let mut two = one_hot(0);
        two.expert_indices.push(1);
        assert!(mode_purity(&[two], &[0], 8).is_err());
    }

    #[test]
    fn report_csv_has_median_rows() {
        let run = |model, seed, avg| ToyRun {
            model,
            seed,
            w2: W2Report {
                per_dim: vec![avg, avg],
                average: avg,
            },
            importance_cv: None,
            purity: None,
            first_epoch_cfm: 1.0,
            last_epoch_cfm: 0.1,
            generated: vec![],
        };
        let r = ToyReport {
            config: ToyConfig::default(),
            runs: vec![run(ToyModel::Moe, 0, 0.3), run(ToyModel::Moe, 1, 0.5), run(ToyModel::Moe, 2, 0.1)],
        };
        assert_eq!(r.median_w2(ToyModel::Moe)[2], 0.3);
        assert!(r.to_csv().contains("moe,median,0.3,0.3,0.3,,"));
    }
}
