use std::fs;
use std::path::Path;

use molf::autodiff::{ParamGroup, ParamStore, Tensor};
use molf::config::KvMap;
use molf::dataio::{
    load_checkpoint, load_dataset, read_manifest, read_matrix, save_checkpoint, write_matrix, Checkpoint, Stage,
};
use molf::fixture::{write_fixture, FixtureConfig};
use molf::MolfError;

fn small_fixture(dir: &Path) -> std::path::PathBuf {
    let cfg = FixtureConfig { slides: 2, grid_w: 4, grid_h: 3, genes: 6, feature_dim: 5, ..FixtureConfig::default() };
    write_fixture(dir, &cfg).unwrap()
}

#[test]
fn fixture_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let m = read_manifest(small_fixture(dir.path())).unwrap();
    let ds = load_dataset(&m).unwrap();
    assert_eq!(ds.rows(), 24);
    assert_eq!(ds.expression.cols(), 6);
    assert_eq!(ds.features.cols(), 5);
    assert_eq!(ds.slides, vec![0..12, 12..24]);
    assert_eq!(ds.vocabulary, vec!["TYPE0", "TYPE1"]);
    assert!(ds.expression.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn manifest_text_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = read_manifest(small_fixture(dir.path())).unwrap();
    let again = molf::dataio::DatasetManifest::parse(&m.to_text(), &m.base_dir).unwrap();
    assert_eq!(again, m);
}

fn expect_validation(r: molf::Result<impl std::fmt::Debug>, needle: &str) {
    match r {
        Err(MolfError::Validation(msg)) => assert!(msg.contains(needle), "{msg} lacks {needle}"),
        other => panic!("expected validation error containing {needle}, got {other:?}"),
    }
}

#[test]
fn manifest_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_fixture(dir.path());
    let text = fs::read_to_string(&path).unwrap();
    let bad = dir.path().join("bad.txt");

    fs::write(&bad, text.replacen("spots=12", "spots=13", 1)).unwrap();
    expect_validation(read_manifest(&bad), "expected 13x6");

    fs::write(&bad, text.replace("slide0.feat.molf", "gone.molf")).unwrap();
    expect_validation(read_manifest(&bad), "gone.molf");

    fs::write(&bad, text.replace("version=1", "version=9")).unwrap();
    expect_validation(read_manifest(&bad), "version 9");

    fs::write(&bad, format!("{text}colour=red\n")).unwrap();
    expect_validation(read_manifest(&bad), "unknown key");

    expect_validation(read_manifest(dir.path().join("absent.txt")), "does not exist");

    // a features file with the wrong width
    write_matrix(dir.path().join("slide0.feat.molf"), 12, 4, &[0.0; 48]).unwrap();
    expect_validation(read_manifest(&path), "features file is 12x4");
}

#[test]
fn truncated_matrix_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.molf");
    write_matrix(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let t = read_matrix(&p).unwrap();
    assert_eq!(t, Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(read_matrix(&p), Err(MolfError::Corrupt { .. })));
}

fn sample_checkpoint() -> Checkpoint {
    let mut params = ParamStore::new();
    params.add("enc.w", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap(), ParamGroup::Backbone);
    params.add("gate.w", Tensor::matrix(1, 3, vec![1e-3, 0.0, -7.5]).unwrap(), ParamGroup::Gate);
    let mut config = KvMap::new();
    config.set("vae.latent_dim", "8");
    config.set("seed", "3");
    Checkpoint { stage: Stage::Flow, config, params }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    let c = sample_checkpoint();
    save_checkpoint(&c, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.encode(), c.encode());
    assert_eq!(back.params.checksum(), c.params.checksum());
    assert_eq!(back.params.group(back.params.find("gate.w").unwrap()), ParamGroup::Gate);
    assert_eq!(back.config.to_text(), c.config.to_text());
}

#[test]
fn every_flipped_byte_is_detected() {
    let bytes = sample_checkpoint().encode();
    for i in 0..bytes.len() {
        let mut b = bytes.clone();
        b[i] ^= 0x10;
        assert!(Checkpoint::decode(&b, Path::new("c")).is_err(), "byte {i}");
    }
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
}

#[test]
fn stage_mismatch_is_config_error() {
    let c = sample_checkpoint();
    assert!(matches!(c.clone().expect_stage(Stage::Vae), Err(MolfError::Config(_))));
    assert!(c.expect_stage(Stage::Flow).is_ok());
}
