use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molf::dataio::read_matrix;
use molf::metrics::pearson_per_gene;

fn molf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molf"))
        .current_dir(dir)
        .env_remove("MOLF_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = molf(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const FAST: [&str; 6] = ["--set", "vae.epochs=4", "--set", "flow.epochs=4", "--set", "flow.patience=4"];

/// Runs generate, train-vae, train-flow and sample inside `dir`.
fn pipeline(dir: &Path, extra: &[&str]) -> PathBuf {
    ok(dir, &["toy-gen", "--fixture", "hist", "--out", "data"]);
    let mut common = vec!["--config", "data/config.txt"];
    common.extend_from_slice(&FAST);
    common.extend_from_slice(extra);
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    let run = |args: &[&str]| {
        let a = with(args);
        ok(dir, &a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["train-vae", "--manifest", "data/manifest.txt", "--out", "vae.ckpt"]);
    run(&["train-flow", "--manifest", "data/manifest.txt", "--vae-checkpoint", "vae.ckpt", "--out", "flow.ckpt"]);
    let models = ["--manifest", "data/manifest.txt", "--vae-checkpoint", "vae.ckpt", "--flow-checkpoint", "flow.ckpt"];
    let mut s = vec!["sample"];
    s.extend_from_slice(&models);
    s.extend_from_slice(&["--w", "2", "--out", "pred.molf", "--truth-out", "truth.molf", "--trajectory", "traj.csv"]);
    run(&s);
    let mut sw = vec!["sweep-cfg"];
    sw.extend_from_slice(&models);
    sw.extend_from_slice(&["--scales", "1,2,3", "--out", "sweep.csv"]);
    run(&sw);
    dir.to_path_buf()
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);
    for f in ["vae.ckpt", "flow.ckpt", "pred.molf", "truth.molf", "traj.csv", "sweep.csv", "vae_log.csv", "flow_log.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f} differs between runs");
    }

    // eval reports the same PCC as the library
    let out = ok(a.path(), &["eval", "--truth", "truth.molf", "--pred", "pred.molf", "--out", "eval.csv"]);
    let line = out.lines().find(|l| l.starts_with("pcc_mean:")).unwrap();
    let shown: f64 = line.split(": ").nth(1).unwrap().parse().unwrap();
    let t = read_matrix(a.path().join("truth.molf")).unwrap().cast::<f64>();
    let p = read_matrix(a.path().join("pred.molf")).unwrap().cast::<f64>();
    let lib = pearson_per_gene(&t, &p).unwrap().mean.unwrap();
    assert!((shown - lib).abs() < 1e-9, "{shown} vs {lib}");

    let sel = ok(a.path(), &["select-cfg", "--table", "sweep.csv", "--tau", "0.05"]);
    assert!(sel.contains("w"), "{sel}");

    let csv = fs::read_to_string(a.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("# molf "));
    assert!(csv.contains("# config_hash:"));
    assert!(csv.contains("# seed:"));

    let models = ["--manifest", "data/manifest.txt", "--flow-checkpoint", "flow.ckpt"];
    let mut r = vec!["routing-report"];
    r.extend_from_slice(&models);
    ok(a.path(), &r);
    let routing = fs::read_to_string(a.path().join("routing.csv")).unwrap();
    assert!(routing.contains("TYPE0") && routing.contains("TYPE1"), "{routing}");
    assert!(a.path().join("routing_jsd.csv").exists());
}

#[test]
fn ablation_flags_change_the_model() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path(), &["--no-moe", "--no-pe"]);
    let ckpt = molf::dataio::load_checkpoint(d.path().join("flow.ckpt")).unwrap();
    assert_eq!(ckpt.config.raw("flow.moe"), Some("false"));
    assert_eq!(ckpt.config.raw("flow.pe"), Some("false"));
    assert!(ckpt.params.entries().iter().all(|e| e.group == molf::autodiff::ParamGroup::Backbone));
    // a dense checkpoint has no routing to report
    let o = molf(d.path(), &["routing-report", "--manifest", "data/manifest.txt", "--flow-checkpoint", "flow.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(molf(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(molf(d.path(), &["toy-bench", "--set", "toy.colour=red"]).status.code(), Some(2));
    let o = molf(d.path(), &["train-flow", "--manifest", "m.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--vae-checkpoint"));
    assert_eq!(molf(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let o = molf(d.path(), &["train-vae", "--manifest", "absent.txt"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    fs::write(d.path().join("junk.ckpt"), b"MOLFCKPT garbage").unwrap();
    let o = molf(d.path(), &["train-flow", "--manifest", "m.txt", "--vae-checkpoint", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn toy_commands_smoke() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["toy-gen", "--n", "500", "--out", "toy.csv", "--seed", "4"]);
    let csv = fs::read_to_string(d.path().join("toy.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 501);
    let small = [
        "--set", "toy.epochs=2", "--set", "toy.steps_per_epoch=2", "--set", "toy.batch=32",
        "--set", "toy.train_samples=256", "--set", "toy.eval_samples=200", "--set", "toy.sample_steps=2",
    ];
    let mut args = vec!["toy-bench", "--seeds", "1", "--out", "bench.csv", "--dump-samples", "gen.csv"];
    args.extend_from_slice(&small);
    let out = ok(d.path(), &args);
    assert!(out.contains("moe median_w2") && out.contains("dense median_w2"), "{out}");
    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &args);
    assert_eq!(fs::read(d.path().join("bench.csv")).unwrap(), fs::read(again.path().join("bench.csv")).unwrap());
}

#[test]
fn out_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_molf"))
        .current_dir(d.path())
        .env("MOLF_OUT_DIR", "results")
        .args(["toy-gen", "--n", "10"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(d.path().join("results/toy_samples.csv").exists());
}
