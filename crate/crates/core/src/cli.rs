//! Command-line front end.
//!
//! Configuration precedence, lowest first: built-in defaults, values stored
//! in an input checkpoint, `--config FILE`, each `--set key=value`, then
//! dedicated flags (`--seed`, `--no-moe`, `--no-pe`, `--w`, `--steps`, `--tau`).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Tensor;
use crate::config::KvMap;
use crate::dataio::{
    load_checkpoint, load_dataset, read_manifest, read_matrix, save_checkpoint, write_atomic, write_tensor, Checkpoint,
    Dataset, Stage,
};
use crate::error::{MolfError, Result};
use crate::fixture::{fixture_overrides, write_fixture, FixtureConfig};
use crate::flow::Decoder;
use crate::metrics::{gene_variances, jsd, pearson_per_gene, variance_stratify, JsdMode, MetricTable, StratifyMode, Tier};
use crate::moe::{routing_distribution, routing_csv, RoutingStat};
use crate::pipeline::{
    checkpoint_vocabulary, expression_rows, flow_from_checkpoint, predict, run_train_flow, run_train_vae, split_spots,
    vae_from_checkpoint, vae_log_csv, velocity_inputs, RunConfig, Split,
};
use crate::sampler::noise_matrix;
use crate::selection::{evaluate_row, filter_and_rank, sweep_cfg};
use crate::toy::{gen_toy_dataset, run_toy_benchmark, samples_csv, ToyConfig, ToyModel};
use crate::velocity::VelocityNet;

/// Default output directory when `--out-dir` is not given.
pub const OUT_DIR_ENV: &str = "MOLF_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "molf", version, about = "Latent flow matching for spatial gene expression")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,
    /// Replace the expert mixture with a dense velocity network
    #[arg(long, global = true)]
    no_moe: bool,
    /// Disable spatial positional encoding
    #[arg(long, global = true)]
    no_pe: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FixtureKind {
    Hist,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StatArg {
    Weight,
    Count,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelsArg {
    Both,
    Moe,
    Dense,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate eight-Gaussian samples, or the synthetic histology fixture
    ToyGen {
        #[arg(long, default_value_t = 80_000)]
        n: usize,
        #[arg(long, value_enum)]
        fixture: Option<FixtureKind>,
        /// Fixture whose features carry no signal
        #[arg(long)]
        control: bool,
        /// CSV path, or the fixture directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the MoE and dense toy models over several seeds
    ToyBench {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_enum, default_value = "both")]
        models: ModelsArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_samples: Option<PathBuf>,
    },
    /// Train the gene autoencoder
    TrainVae {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the velocity network against a frozen autoencoder
    TrainFlow {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vae_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate expression for a split
    Sample {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Predicted expression matrix
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth expression of the same spots
        #[arg(long)]
        truth_out: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Score a prediction matrix against the truth
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample at several guidance scales and tabulate MSE, W1 and cosine distance
    SweepCfg {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9")]
        scales: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick a guidance scale from a sweep table
    SelectCfg {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expert usage per cancer type at t = 0 and pairwise Jensen-Shannon distances
    RoutingReport {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        flow_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, value_enum, default_value = "weight")]
        stat: StatArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jsd_out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelPaths {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
    #[arg(long)]
    flow_checkpoint: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<MolfError> for CliError {
    fn from(e: MolfError) -> Self {
        let code = match e {
            MolfError::Config(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: msg.into(),
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    v.as_ref().ok_or_else(|| usage(format!("missing required flag {flag}")))
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (including the program name), run, and return the exit code.
/// Diagnostics go to stderr as a single line.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("molf: error: {}", e.message.replace('\n', "; "));
            e.code
        }
    }
}

fn toy_keys() -> Vec<&'static str> {
    vec![
        "toy.radius",
        "toy.variance",
        "toy.train_samples",
        "toy.eval_samples",
        "toy.epochs",
        "toy.steps_per_epoch",
        "toy.batch",
        "toy.lr",
        "toy.gate_lr",
        "toy.lambda_aux",
        "toy.w",
        "toy.p_drop",
        "toy.sample_steps",
    ]
}

fn check_known(kv: &KvMap) -> Result<()> {
    let mut known: BTreeSet<String> = RunConfig::from_kv(&KvMap::new(), 1, 1, 1)
        .expect("defaults are valid")
        .to_kv()
        .keys()
        .map(str::to_string)
        .collect();
    known.extend(toy_keys().into_iter().map(str::to_string));
    known.insert("flow.best_epoch".into());
    for k in kv.keys() {
        if !known.contains(k) && !k.starts_with("data.") {
            return Err(MolfError::Config(format!("unknown field `{k}`")));
        }
    }
    Ok(())
}

/// Merge configuration sources in precedence order.
fn resolve(common: &Common, base: Option<&KvMap>, flags: &[(&str, String)]) -> Result<KvMap> {
    let mut kv = base.cloned().unwrap_or_default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MolfError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        kv.merge(&KvMap::parse(&text)?);
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| MolfError::Config(format!("--set expects key=value, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    if common.no_moe {
        kv.set("flow.moe", false);
    }
    if common.no_pe {
        kv.set("flow.pe", false);
    }
    for (k, v) in flags {
        kv.set(k, v);
    }
    check_known(&kv)?;
    Ok(kv)
}

fn toy_config(kv: &KvMap) -> Result<ToyConfig> {
    let d = ToyConfig::default();
    let c = ToyConfig {
        radius: kv.get_or("toy.radius", d.radius)?,
        variance: kv.get_or("toy.variance", d.variance)?,
        train_samples: kv.get_or("toy.train_samples", d.train_samples)?,
        eval_samples: kv.get_or("toy.eval_samples", d.eval_samples)?,
        epochs: kv.get_or("toy.epochs", d.epochs)?,
        steps_per_epoch: kv.get_or("toy.steps_per_epoch", d.steps_per_epoch)?,
        batch_size: kv.get_or("toy.batch", d.batch_size)?,
        lr: kv.get_or("toy.lr", d.lr)?,
        gate_lr: kv.get_or("toy.gate_lr", d.gate_lr)?,
        lambda_aux: kv.get_or("toy.lambda_aux", d.lambda_aux)?,
        w: kv.get_or("toy.w", d.w)?,
        p_drop: kv.get_or("toy.p_drop", d.p_drop)?,
        sample_steps: kv.get_or("toy.sample_steps", d.sample_steps)?,
        ..d
    };
    c.validate().map_err(|e| MolfError::Config(format!("toy: {e}")))?;
    Ok(c)
}

fn toy_kv(c: &ToyConfig, seed: u64) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("seed", seed);
    kv.set("toy.radius", c.radius);
    kv.set("toy.variance", c.variance);
    kv.set("toy.train_samples", c.train_samples);
    kv.set("toy.eval_samples", c.eval_samples);
    kv.set("toy.epochs", c.epochs);
    kv.set("toy.steps_per_epoch", c.steps_per_epoch);
    kv.set("toy.batch", c.batch_size);
    kv.set("toy.lr", c.lr);
    kv.set("toy.gate_lr", c.gate_lr);
    kv.set("toy.lambda_aux", c.lambda_aux);
    kv.set("toy.w", c.w);
    kv.set("toy.p_drop", c.p_drop);
    kv.set("toy.sample_steps", c.sample_steps);
    kv
}

/// Comment block placed above every CSV table.
pub fn csv_header(command: &str, config: &KvMap) -> String {
    let mut s = format!(
        "# molf {}\n# command: {command}\n# config_hash: {}\n# seed: {}\n",
        env!("CARGO_PKG_VERSION"),
        config.hash(),
        config.raw("seed").unwrap_or("0")
    );
    for line in config.to_text().lines() {
        s.push_str("# config: ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn write_csv(path: &Path, command: &str, config: &KvMap, body: &str) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, format!("{}{body}", csv_header(command, config)).as_bytes())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p).map_err(|e| MolfError::io(p, e))?;
        }
    }
    Ok(())
}

fn out_path(common: &Common, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| common.out_dir.join(default))
}

fn load(manifest: &Path) -> Result<Dataset> {
    load_dataset(&read_manifest(manifest)?)
}

fn run_config(kv: &KvMap, ds: &Dataset) -> Result<RunConfig> {
    RunConfig::from_kv(kv, ds.genes.len(), ds.features.cols(), ds.vocabulary.len())
}

fn split_rows(ds: &Dataset, cfg: &RunConfig, name: &str) -> Result<Vec<usize>> {
    let s: Split = split_spots(&ds.slides, cfg.split_val, cfg.split_test, cfg.seed);
    let rows = s.get(name)?;
    if rows.is_empty() {
        return Err(MolfError::Config(format!("split `{name}` has no spots")));
    }
    Ok(rows)
}

fn check_vocabulary(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    let v = checkpoint_vocabulary(ckpt);
    if !v.is_empty() && v != ds.vocabulary {
        return Err(MolfError::Config(format!(
            "dataset cancer types [{}] differ from the checkpoint's [{}]",
            ds.vocabulary.join(","),
            v.join(",")
        )));
    }
    Ok(())
}

struct Loaded {
    ds: Dataset,
    kv: KvMap,
    cfg: RunConfig,
    vae: crate::vae::GeneVae,
    vae_store: crate::autodiff::ParamStore<f32>,
    net: VelocityNet,
    store: crate::autodiff::ParamStore<f32>,
}

fn load_models(common: &Common, m: &ModelPaths, flags: &[(&str, String)]) -> CliResult<Loaded> {
    let vae_path = required(&m.vae_checkpoint, "--vae-checkpoint")?;
    let flow_path = required(&m.flow_checkpoint, "--flow-checkpoint")?;
    let vae_ckpt = load_checkpoint(vae_path)?.expect_stage(Stage::Vae)?;
    let flow_ckpt = load_checkpoint(flow_path)?.expect_stage(Stage::Flow)?;
    let ds = load(&m.manifest)?;
    check_vocabulary(&flow_ckpt, &ds)?;
    let kv = resolve(common, Some(&flow_ckpt.config), flags)?;
    let cfg = run_config(&kv, &ds)?;
    let (vae, vae_store) = vae_from_checkpoint(&vae_ckpt)?;
    let (net, store) = flow_from_checkpoint(&flow_ckpt)?;
    if vae.config.gene_dim != ds.genes.len() || vae.config.latent_dim != net.config.latent_dim {
        return Err(MolfError::Config("checkpoints do not match each other or the dataset".into()).into());
    }
    Ok(Loaded {
        ds,
        kv,
        cfg,
        vae,
        vae_store,
        net,
        store,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match &cli.command {
        Command::ToyGen {
            n,
            fixture,
            control,
            out,
        } => {
            let kv = resolve(common, None, &[])?;
            let seed = kv.get_or("seed", 0u64)?;
            match fixture {
                Some(FixtureKind::Hist) => {
                    let dir = out_path(common, out, if *control { "fixtures/hist_control" } else { "fixtures/hist" });
                    let cfg = FixtureConfig {
                        control: *control,
                        seed,
                        ..FixtureConfig::default()
                    };
                    let manifest = write_fixture(&dir, &cfg)?;
                    let mut overrides = fixture_overrides();
                    overrides.set("seed", seed);
                    write_atomic(&dir.join("config.txt"), overrides.to_text().as_bytes())?;
                    println!("{}", manifest.display());
                }
                None => {
                    let cfg = toy_config(&kv)?;
                    let path = out_path(common, out, "toy_samples.csv");
                    let samples = gen_toy_dataset(*n, seed, &cfg);
                    write_csv(&path, "toy-gen", &toy_kv(&cfg, seed), &samples_csv(&samples))?;
                    println!("{}", path.display());
                }
            }
        }
        Command::ToyBench {
            seeds,
            models,
            out,
            dump_samples,
        } => {
            let kv = resolve(common, None, &[])?;
            let seed = kv.get_or("seed", 0u64)?;
            let cfg = toy_config(&kv)?;
            if *seeds == 0 {
                return Err(usage("--seeds must be at least 1"));
            }
            let list: Vec<u64> = (0..*seeds).map(|i| seed + i).collect();
            let report = match models {
                ModelsArg::Both => run_toy_benchmark(&cfg, &list)?,
                ModelsArg::Moe | ModelsArg::Dense => {
                    let model = if matches!(models, ModelsArg::Moe) { ToyModel::Moe } else { ToyModel::Dense };
                    let runs = list
                        .iter()
                        .map(|&s| crate::toy::run_toy_model(&cfg, model, s))
                        .collect::<Result<Vec<_>>>()?;
                    crate::toy::ToyReport { config: cfg.clone(), runs }
                }
            };
            let echo = toy_kv(&cfg, seed);
            let path = out_path(common, out, "toy_report.csv");
            write_csv(&path, "toy-bench", &echo, &report.to_csv())?;
            if let Some(p) = dump_samples {
                write_csv(p, "toy-bench", &echo, &report.samples_csv())?;
            }
            for model in [ToyModel::Moe, ToyModel::Dense] {
                if report.runs_of(model).next().is_some() {
                    let m = report.median_w2(model);
                    println!("{} median_w2: dim1={} dim2={} average={}", model.as_str(), m[0], m[1], m[2]);
                }
            }
        }
        Command::TrainVae { manifest, out, log } => {
            let ds = load(manifest)?;
            let kv = resolve(common, None, &[])?;
            let cfg = run_config(&kv, &ds)?;
            let rows = split_rows(&ds, &cfg, "train")?;
            let stage = run_train_vae(&ds, &rows, &cfg)?;
            let path = out_path(common, out, "vae.ckpt");
            ensure_parent(&path)?;
            save_checkpoint(&stage.checkpoint, &path)?;
            write_csv(
                &out_path(common, log, "vae_log.csv"),
                "train-vae",
                &stage.checkpoint.config,
                &vae_log_csv(&stage.history),
            )?;
            println!("checkpoint: {}", path.display());
            println!("checksum: {}", stage.checkpoint.params.checksum());
        }
        Command::TrainFlow {
            manifest,
            vae_checkpoint,
            out,
            log,
        } => {
            let vae_path = required(vae_checkpoint, "--vae-checkpoint")?;
            let vae_ckpt = load_checkpoint(vae_path)?.expect_stage(Stage::Vae)?;
            let ds = load(manifest)?;
            let kv = resolve(common, Some(&vae_ckpt.config), &[])?;
            let cfg = run_config(&kv, &ds)?;
            let (vae, vae_store) = vae_from_checkpoint(&vae_ckpt)?;
            let rows = split_rows(&ds, &cfg, "train")?;
            let stage = run_train_flow(&ds, &rows, &vae, &vae_store, &cfg)?;
            let path = out_path(common, out, "flow.ckpt");
            ensure_parent(&path)?;
            save_checkpoint(&stage.checkpoint, &path)?;
            write_csv(&out_path(common, log, "flow_log.csv"), "train-flow", &stage.checkpoint.config, &stage.log_csv)?;
            println!("checkpoint: {}", path.display());
            println!("vae_checksum: {}", vae_store.checksum());
        }
        Command::Sample {
            models,
            split,
            w,
            steps,
            out,
            truth_out,
            trajectory,
        } => {
            let mut flags = Vec::new();
            if let Some(w) = w {
                flags.push(("sample.w", w.to_string()));
            }
            if let Some(s) = steps {
                flags.push(("sample.steps", s.to_string()));
            }
            let l = load_models(common, models, &flags)?;
            let rows = split_rows(&l.ds, &l.cfg, split)?;
            let g = predict(
                &l.ds,
                &rows,
                &l.net,
                &l.store,
                &l.vae,
                &l.vae_store,
                l.cfg.sample_w,
                l.cfg.sample_steps,
                l.cfg.seed,
            )?;
            let pred = g.expression.expect("decoder given");
            let path = out_path(common, out, "pred.molf");
            ensure_parent(&path)?;
            write_tensor(&path, &pred)?;
            if let Some(p) = truth_out {
                ensure_parent(p)?;
                write_tensor(p, &expression_rows(&l.ds, &rows))?;
            }
            if let Some(p) = trajectory {
                let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
                write_csv(p, "sample", &l.kv, &g.trajectory.to_csv(&ids)?)?;
            }
            println!("prediction: {} ({} spots)", path.display(), rows.len());
        }
        Command::Eval { truth, pred, out } => {
            let kv = resolve(common, None, &[])?;
            let truth = read_matrix(truth)?;
            let pred = read_matrix(pred)?;
            let body = eval_report(&truth, &pred)?;
            print!("{body}");
            if let Some(p) = out {
                let csv: String = std::iter::once("metric,value\n".to_string())
                    .chain(body.lines().map(|l| l.replacen(": ", ",", 1) + "\n"))
                    .collect();
                write_csv(p, "eval", &kv, &csv)?;
            }
        }
        Command::SweepCfg {
            models,
            split,
            scales,
            steps,
            out,
        } => {
            let flags: Vec<(&str, String)> = steps.iter().map(|s| ("sample.steps", s.to_string())).collect();
            let l = load_models(common, models, &flags)?;
            let rows = split_rows(&l.ds, &l.cfg, split)?;
            let inputs = velocity_inputs(&l.ds, &rows, l.net.config.latent_dim);
            let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
            let dec = Decoder {
                vae: &l.vae,
                store: &l.vae_store,
            };
            let table = sweep_cfg(
                scales,
                &l.net,
                &l.store,
                &inputs,
                &ids,
                &expression_rows(&l.ds, &rows),
                Some(&dec),
                l.cfg.seed,
                l.cfg.sample_steps,
            )?;
            let path = out_path(common, out, "cfg_sweep.csv");
            write_csv(&path, "sweep-cfg", &l.kv, &table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Command::SelectCfg { table, tau, out } => {
            let flags: Vec<(&str, String)> = tau.iter().map(|t| ("select.tau", t.to_string())).collect();
            let kv = resolve(common, None, &flags)?;
            let tau = kv.get_or("select.tau", 0.05)?;
            let text = std::fs::read_to_string(table).map_err(|e| MolfError::io(table, e))?;
            let t = MetricTable::from_csv(&text)?;
            let r = filter_and_rank(&t, tau)?;
            println!("{r}");
            if let Some(p) = out {
                write_csv(p, "select-cfg", &kv, &format!("{r}\n"))?;
            }
        }
        Command::RoutingReport {
            manifest,
            flow_checkpoint,
            split,
            stat,
            out,
            jsd_out,
        } => {
            let path = required(flow_checkpoint, "--flow-checkpoint")?;
            let ckpt = load_checkpoint(path)?.expect_stage(Stage::Flow)?;
            let ds = load(manifest)?;
            check_vocabulary(&ckpt, &ds)?;
            let kv = resolve(common, Some(&ckpt.config), &[])?;
            let cfg = run_config(&kv, &ds)?;
            let (net, store) = flow_from_checkpoint(&ckpt)?;
            if net.config.kind != crate::velocity::VelocityKind::Moe {
                return Err(usage("routing-report needs a mixture-of-experts checkpoint"));
            }
            let rows = split_rows(&ds, &cfg, split)?;
            let (classes, table, distances) = routing_report(&ds, &rows, &net, &store, cfg.seed, stat_of(*stat))?;
            let csv = routing_csv(&classes, &table);
            write_csv(&out_path(common, out, "routing.csv"), "routing-report", &kv, &csv)?;
            write_csv(
                &out_path(common, jsd_out, "routing_jsd.csv"),
                "routing-report",
                &kv,
                &jsd_csv(&classes, &distances),
            )?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn stat_of(s: StatArg) -> RoutingStat {
    match s {
        StatArg::Weight => RoutingStat::Weight,
        StatArg::Count => RoutingStat::Count,
    }
}

/// Metric lines `name: value` for a prediction.
pub fn eval_report(truth: &Tensor<f32>, pred: &Tensor<f32>) -> Result<String> {
    let pcc = pearson_per_gene(truth, pred)?;
    let row = evaluate_row(0.0, truth, pred)?;
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
    let mut s = format!("pcc_mean: {}\n", fmt(pcc.mean));
    let stats = variance_stratify(&gene_variances(truth), StratifyMode::Tertiles)?;
    for tier in [Tier::Low, Tier::Mid, Tier::High] {
        s.push_str(&format!("pcc_{}: {}\n", tier.as_str(), fmt(pcc.mean_over(&stats.genes_in(tier)))));
    }
    s.push_str(&format!("pcc_undefined_genes: {}\n", pcc.undefined()));
    s.push_str(&format!("mse: {}\nw1: {}\ncos: {}\n", row.mse, row.w1, row.cos));
    Ok(s)
}

/// Gate decisions at `t = 0` on fresh per-spot noise, tabulated per cancer
/// type present among `rows`, plus the pairwise Jensen-Shannon distances.
pub fn routing_report(
    ds: &Dataset,
    rows: &[usize],
    net: &VelocityNet,
    store: &crate::autodiff::ParamStore<f32>,
    seed: u64,
    stat: RoutingStat,
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut batch = velocity_inputs(ds, rows, net.config.latent_dim);
    let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    batch.z_t = noise_matrix(seed, &ids, net.config.latent_dim);
    let (_, decisions) = net.eval(store, &batch)?;
    let labels: Vec<usize> = rows.iter().map(|&r| ds.type_ids[r]).collect();
    let n_experts = net.config.experts;
    let full = routing_distribution(&decisions, &labels, ds.vocabulary.len(), n_experts, stat)?;
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let classes: Vec<String> = present.iter().map(|&c| ds.vocabulary[c].clone()).collect();
    let table: Vec<Vec<f64>> = present.iter().map(|&c| full[c].clone()).collect();
    let probs: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| v / 100.0).collect()).collect();
    let mut distances = vec![vec![0.0; probs.len()]; probs.len()];
    for i in 0..probs.len() {
        for j in 0..probs.len() {
            distances[i][j] = jsd(&probs[i], &probs[j], JsdMode::Distance)?;
        }
    }
    Ok((classes, table, distances))
}

pub fn jsd_csv(classes: &[String], d: &[Vec<f64>]) -> String {
    let mut s = String::from("class");
    for c in classes {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (c, row) in classes.iter().zip(d) {
        s.push_str(c);
        for v in row {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}
