//! Brute-force reimplementations of the metrics.

use molf::autodiff::Tensor;
use molf::metrics::{cosine_distance, jsd, mean_w1_per_spot, mse, pearson_per_gene, w1_1d, w2_per_dimension, JsdMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Optimal matching cost over all pairings of two equal-size point sets.
fn best_matching(a: &[f64], b: &[f64], cost: impl Fn(f64, f64) -> f64) -> f64 {
    permutations(a.len())
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost(a[i], b[j])).sum::<f64>() / a.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

fn column(m: &Tensor<f64>, c: usize) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, c)).collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    if v.iter().sum::<f64>() == 0.0 {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Largest absolute deviation from the oracle, per metric, over `fixtures` random cases.
pub fn metric_suite(fixtures: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 6];
    let mut note = |i: usize, got: f64, want: f64| {
        let e = (got - want).abs();
        worst[i] = if e.is_nan() { f64::INFINITY } else { worst[i].max(e) };
    };
    for seed in 0..fixtures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(3..12), rng.random_range(1..6));
        let (t, p) = (random_matrix(&mut rng, r, c), random_matrix(&mut rng, r, c));
        let rep = pearson_per_gene(&t, &p).unwrap();
        let mut sum = 0.0;
        for g in 0..c {
            let o = oracle_pearson(&column(&t, g), &column(&p, g));
            note(0, rep.per_gene[g].unwrap_or(f64::NAN), o);
            sum += o;
        }
        note(0, rep.mean.unwrap_or(f64::NAN), sum / c as f64);

        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c) = (rng.random_range(1..4), rng.random_range(1..7));
        let (t, p) = (random_matrix(&mut rng, r, c), random_matrix(&mut rng, r, c));
        let mut expect = 0.0;
        for row in 0..r {
            let (a, b) = (t.row_slice(row), p.row_slice(row));
            let o = best_matching(a, b, |x, y| (x - y).abs());
            note(1, w1_1d(a, b), o);
            expect += o;
        }
        note(1, mean_w1_per_spot(&t, &p).unwrap(), expect / r as f64);

        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, d) = (rng.random_range(1..7), rng.random_range(1..4));
        let (t, p) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, n, d));
        let rep = w2_per_dimension(&t, &p).unwrap();
        let mut sum = 0.0;
        for c in 0..d {
            let o = best_matching(&column(&t, c), &column(&p, c), |x, y| (x - y) * (x - y)).sqrt();
            note(2, rep.per_dim[c], o);
            sum += o;
        }
        note(2, rep.average, sum / d as f64);

        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (r, c) = (rng.random_range(1..8), rng.random_range(2..6));
        let (t, p) = (random_matrix(&mut rng, r, c), random_matrix(&mut rng, r, c));
        let mut expect = 0.0;
        for row in 0..r {
            let (a, b) = (t.row_slice(row), p.row_slice(row));
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            // 1 - cos = |u_a - u_b|^2 / 2 for unit vectors
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
            expect += d2 / 2.0;
        }
        note(3, cosine_distance(&t, &p).unwrap().mean, expect / r as f64);

        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (r, c) = (rng.random_range(1..8), rng.random_range(1..8));
        let (t, p) = (random_matrix(&mut rng, r, c), random_matrix(&mut rng, r, c));
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..c {
                s += (t.get(i, j) - p.get(i, j)).powi(2);
            }
        }
        note(4, mse(&t, &p).unwrap(), s / (r * c) as f64);

        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(2..9);
        let (p, q) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        // JS = H(m) - (H(p) + H(q)) / 2, natural log converted to bits
        let h = |d: &[f64]| -d.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let div = (h(&m) - 0.5 * (h(&p) + h(&q))) / std::f64::consts::LN_2;
        note(5, jsd(&p, &q, JsdMode::Divergence).unwrap(), div);
        note(5, jsd(&q, &p, JsdMode::Divergence).unwrap(), div);
    }
    ["pcc", "w1", "w2", "cosine", "mse", "jsd"].into_iter().zip(worst).collect()
}
