//! Metrics against brute-force reimplementations on random small fixtures.

mod common;

use molf::autodiff::Tensor;
use molf::metrics::{cosine_distance, jsd, pearson_per_gene, variance_stratify, w1_1d, w2_per_dimension, JsdMode, StratifyMode, Tier, TierBounds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_oracles() {
    for (name, err) in common::oracles::metric_suite(25) {
        assert!(err < 1e-8, "{name}: {err}");
    }
}

#[test]
fn jsd_distance_is_root_of_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.01).collect();
        let q: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.01).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
        let div = jsd(&p, &q, JsdMode::Divergence).unwrap();
        assert!((jsd(&p, &q, JsdMode::Distance).unwrap() - div.max(0.0).sqrt()).abs() < 1e-7);
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn constant_gene_is_undefined_and_skipped() {
    let t = Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
    let p = Tensor::matrix(3, 2, vec![2.0, 5.0, 4.0, 6.0, 6.0, 7.0]).unwrap();
    let r = pearson_per_gene(&t, &p).unwrap();
    assert_eq!(r.per_gene[1], None);
    assert_eq!(r.undefined(), 1);
    assert!((r.mean.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn w1_identical_and_shifted() {
    let a = [0.3, -1.0, 2.0, 5.5];
    assert_eq!(w1_1d(&a, &a), 0.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.75).collect();
    assert!((w1_1d(&a, &b) - 0.75).abs() < 1e-12);
}

#[test]
fn w2_of_shifted_gaussian_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_matrix(&mut rng, 50, 2);
    let b = a.map(|v| v + 0.4);
    let r = w2_per_dimension(&a, &b).unwrap();
    for v in r.per_dim {
        assert!((v - 0.4).abs() < 1e-12);
    }
}

#[test]
fn cosine_skips_zero_rows() {
    let t = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let p = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let r = cosine_distance(&t, &p).unwrap();
    assert_eq!(r.excluded, 1);
    assert!((r.mean - 1.0).abs() < 1e-12);
}

#[test]
fn jsd_closed_forms() {
    assert_eq!(jsd(&[0.5, 0.5], &[0.5, 0.5], JsdMode::Distance).unwrap(), 0.0);
    assert!((jsd(&[1.0, 0.0], &[0.0, 1.0], JsdMode::Distance).unwrap() - 1.0).abs() < 1e-12);
    assert!(jsd(&[0.7, 0.7], &[0.5, 0.5], JsdMode::Distance).is_err());
}

#[test]
fn hallmark_tier_thresholds() {
    let b = TierBounds::HALLMARK;
    assert_eq!(b.assign(0.9178), Tier::Low);
    assert_eq!(b.assign(0.95), Tier::Mid);
    assert_eq!(b.assign(1.0211), Tier::High);
    let s = variance_stratify(&[0.5, 1.0, 2.0], StratifyMode::Thresholds(b)).unwrap();
    assert_eq!(s.tiers, vec![Tier::Low, Tier::Mid, Tier::High]);
}

#[test]
fn tertiles_split_evenly() {
    let v: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let s = variance_stratify(&v, StratifyMode::Tertiles).unwrap();
    for t in [Tier::Low, Tier::Mid, Tier::High] {
        assert_eq!(s.genes_in(t).len(), 3);
    }
    assert_eq!(s.genes_in(Tier::High), vec![6, 7, 8]);
}
