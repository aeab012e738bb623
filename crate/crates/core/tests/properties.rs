use molf::autodiff::{Graph, ParamGroup, ParamStore, Tensor};
use molf::config::KvMap;
use molf::dataio::{decode_matrix, encode_matrix, log1p_normalize, LIBRARY_SIZE};
use molf::flow::{ot_path, target_velocity, terminal_estimate};
use molf::metrics::{cosine_distance, jsd, mean_w1_per_spot, w1_1d, w2_per_dimension, JsdMode, MetricRow, MetricTable};
use molf::moe::{compose_velocity, gate, load_balance_loss};
use molf::nn::{sinusoidal_pe, time_embed, AttentionConfig, AttentionLayer};
use molf::sampler::{cfg_velocity, euler_integrate};
use molf::selection::filter_and_rank;
use molf::toy::{gen_toy_sample_at, mode_of, ToyConfig};
use molf::vae::{kl_to_standard_normal, PosteriorParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn vec_of(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    vec_of(rows * cols, -5.0, 5.0).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_decisions_are_well_formed(logits in vec_of(6, -8.0, 8.0), k in 1usize..=6) {
        let d = gate(&logits, k).unwrap();
        prop_assert_eq!(d.expert_indices.len(), k);
        let mut idx = d.expert_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(d.weights.iter().all(|&w| w > 0.0));
        prop_assert!((d.full_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // selected experts carry the largest probabilities
        let min_sel = d.expert_indices.iter().map(|&i| d.full_probs[i]).fold(f64::INFINITY, f64::min);
        for e in 0..6 {
            if !d.expert_indices.contains(&e) {
                prop_assert!(d.full_probs[e] <= min_sel);
            }
        }
    }

    #[test]
    fn compose_is_linear(logits in vec_of(4, -3.0, 3.0), k in 1usize..=4,
                         a in vec_of(12, -2.0, 2.0), b in vec_of(12, -2.0, 2.0)) {
        let d = gate(&logits, k).unwrap();
        let split = |v: &[f64]| -> Vec<Vec<f64>> { (0..k).map(|i| v[i * 3..i * 3 + 3].to_vec()).collect() };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = compose_velocity(&d, &split(&sum)).unwrap();
        let ra = compose_velocity(&d, &split(&a)).unwrap();
        let rb = compose_velocity(&d, &split(&b)).unwrap();
        for i in 0..3 {
            prop_assert!((lhs[i] - ra[i] - rb[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn load_balance_is_nonnegative(rows in prop::collection::vec(vec_of(5, -4.0, 4.0), 1..10)) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|l| gate(l, 5).unwrap().full_probs).collect();
        prop_assert!(load_balance_loss(&probs).unwrap() >= 0.0);
    }

    #[test]
    fn ot_path_identities(z0 in vec_of(5, -3.0, 3.0), z1 in vec_of(5, -3.0, 3.0), t in 0.0f64..1.0) {
        prop_assert_eq!(ot_path(&z0, &z1, 0.0).unwrap(), z0.clone());
        let end = ot_path(&z0, &z1, 1.0).unwrap();
        for (a, b) in end.iter().zip(&z1) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // linear in t: z_t = z0 + t (z1 - z0)
        let zt = ot_path(&z0, &z1, t).unwrap();
        let v = target_velocity(&z0, &z1).unwrap();
        for i in 0..5 {
            prop_assert!((zt[i] - (z0[i] + t * v[i])).abs() < 1e-12);
        }
        let back = terminal_estimate(&zt, t, &v).unwrap();
        for (a, b) in back.iter().zip(&z1) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cfg_passthrough_and_affinity(c in vec_of(4, -3.0, 3.0), u in vec_of(4, -3.0, 3.0), w in 0.0f64..10.0) {
        prop_assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u.clone());
        let v = cfg_velocity(&c, &u, w).unwrap();
        for i in 0..4 {
            prop_assert!((v[i] - (u[i] + w * (c[i] - u[i]))).abs() < 1e-9);
        }
    }

    #[test]
    fn euler_trajectory_times(steps in 1usize..20, z in matrix(2, 3)) {
        let (_, traj) = euler_integrate(z, |z, _| Ok(z.map(|v| -v)), steps).unwrap();
        prop_assert_eq!(traj.states.len(), steps + 1);
        for (i, (t, _)) in traj.states.iter().enumerate() {
            prop_assert_eq!(*t, i as f64 / steps as f64);
        }
    }

    #[test]
    fn kl_is_nonnegative(mu in vec_of(4, -5.0, 5.0), sigma in vec_of(4, 0.01, 5.0)) {
        let kl = kl_to_standard_normal(&PosteriorParams { mu, sigma }).unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn encodings_are_bounded(x in -100.0f64..100.0, y in -100.0f64..100.0, t in 0.0f64..=1.0) {
        for v in sinusoidal_pe([x, y], 16, 10_000.0).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        for v in time_embed(t, 16, 10_000.0, 1000.0).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn distances_symmetric_nonnegative(a in matrix(4, 3), b in matrix(4, 3)) {
        let ab = mean_w1_per_spot(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mean_w1_per_spot(&b, &a).unwrap()).abs() < 1e-12);
        let w2ab = w2_per_dimension(&a, &b).unwrap().average;
        prop_assert!(w2ab >= 0.0);
        prop_assert!((w2ab - w2_per_dimension(&b, &a).unwrap().average).abs() < 1e-12);
        prop_assert!(cosine_distance(&a, &b).unwrap().mean >= -1e-12);
    }

    #[test]
    fn w1_triangle(a in matrix(3, 5), b in matrix(3, 5), c in matrix(3, 5)) {
        let ac = mean_w1_per_spot(&a, &c).unwrap();
        let ab = mean_w1_per_spot(&a, &b).unwrap();
        let bc = mean_w1_per_spot(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn w1_1d_symmetric(a in vec_of(6, -5.0, 5.0), b in vec_of(6, -5.0, 5.0)) {
        prop_assert!((w1_1d(&a, &b) - w1_1d(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn jsd_symmetric(p in vec_of(5, 0.0, 1.0), q in vec_of(5, 0.0, 1.0)) {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum::<f64>() + 1e-3;
            v.iter().map(|x| (x + 2e-4) / s).collect()
        };
        let (p, q) = (norm(&p), norm(&q));
        let a = jsd(&p, &q, JsdMode::Distance).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - jsd(&q, &p, JsdMode::Distance).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_scale_invariant(a in matrix(3, 4), b in matrix(3, 4), s in vec_of(3, 0.1, 10.0)) {
        let mut scaled = a.clone();
        for r in 0..3 {
            for c in 0..4 {
                scaled.data_mut()[r * 4 + c] *= s[r];
            }
        }
        let x = cosine_distance(&a, &b).unwrap().mean;
        let y = cosine_distance(&scaled, &b).unwrap().mean;
        prop_assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn selection_respects_threshold(rows in prop::collection::vec((0.0f64..1.0, 0.01f64..1.0, 0.0f64..1.0), 1..10),
                                    tau in 0.0f64..0.5) {
        let t = MetricTable::new(rows.iter().enumerate().map(|(i, &(mse, w1, cos))| MetricRow {
            w: i as f64, mse, w1, cos,
        }).collect()).unwrap();
        let r = filter_and_rank(&t, tau).unwrap();
        prop_assert!(r.valid.contains(&r.w));
        for row in &t.rows {
            prop_assert_eq!(r.valid.contains(&row.w), row.w1 <= (1.0 + tau) * r.e_star);
        }
        // monotone relabeling keeps the selected row
        let relabeled = MetricTable::new(t.rows.iter().map(|x| MetricRow { w: 3.0 * x.w + 0.5, ..*x }).collect()).unwrap();
        prop_assert_eq!(filter_and_rank(&relabeled, tau).unwrap().w, 3.0 * r.w + 0.5);
    }

    #[test]
    fn tau_extremes(rows in prop::collection::vec((0.0f64..1.0, 0.01f64..1.0, 0.0f64..1.0), 1..10)) {
        let t = MetricTable::new(rows.iter().enumerate().map(|(i, &(mse, w1, cos))| MetricRow {
            w: i as f64, mse, w1, cos,
        }).collect()).unwrap();
        let inf = filter_and_rank(&t, f64::INFINITY).unwrap();
        let min_cos = t.rows.iter().map(|r| r.cos).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(t.rows.iter().find(|r| r.w == inf.w).unwrap().cos, min_cos);
        let zero = filter_and_rank(&t, 0.0).unwrap();
        let min_w1 = t.rows.iter().map(|r| r.w1).fold(f64::INFINITY, f64::min);
        for w in zero.valid {
            prop_assert_eq!(t.rows.iter().find(|r| r.w == w).unwrap().w1, min_w1);
        }
    }

    #[test]
    fn toy_modes(theta in 0.0f64..(2.0 * std::f64::consts::PI), seed in 0u64..1000) {
        let cfg = ToyConfig::default();
        let s = gen_toy_sample_at(theta, &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
        prop_assert_eq!(s.mode, (4.0 * theta / std::f64::consts::PI).floor() as usize);
        prop_assert_eq!(s.mode, mode_of(theta));
        let norm = (s.condition[0].powi(2) + s.condition[1].powi(2)).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let mu = cfg.mode_mean(s.mode);
        prop_assert!(((mu[0].powi(2) + mu[1].powi(2)).sqrt() - cfg.radius).abs() < 1e-12);
    }

    #[test]
    fn log1p_scale_invariant(counts in vec_of(12, 0.0, 500.0), s in 0.5f64..20.0) {
        let a = Tensor::matrix(2, 6, counts.iter().map(|&v| v.round() as f32).collect()).unwrap();
        let b = a.map(|v| v * s as f32);
        let na = log1p_normalize(&a, LIBRARY_SIZE).unwrap();
        let nb = log1p_normalize(&b, LIBRARY_SIZE).unwrap();
        prop_assert!(na.data().iter().all(|&v| v >= 0.0));
        for (x, y) in na.data().iter().zip(nb.data()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn matrix_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f32> = (0..rows * cols).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect();
        let bytes = encode_matrix(rows, cols, &vals).unwrap();
        let t = decode_matrix(&bytes, Path::new("m")).unwrap();
        prop_assert_eq!(t.data(), &vals[..]);
        prop_assert_eq!(encode_matrix(t.rows(), t.cols(), t.data()).unwrap(), bytes);
    }

    #[test]
    fn kv_round_trip(entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z_]{1,6})?", "[A-Za-z0-9_.,-]{0,10}", 0..8)) {
        let mut kv = KvMap::new();
        for (k, v) in &entries {
            kv.set(k, v);
        }
        let text = kv.to_text();
        let back = KvMap::parse(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back.hash(), kv.hash());
    }
}

fn attention_fixture() -> (AttentionLayer, ParamStore<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig {
        zero_init_residual: false,
        ..AttentionConfig::new(8, 2)
    };
    let layer = AttentionLayer::new(&mut store, "a", cfg, ParamGroup::Backbone, &mut rng).unwrap();
    (layer, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_attention_is_permutation_equivariant(x in vec_of(40, -10.0, 10.0), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let (layer, store) = attention_fixture();
        let x = Tensor::matrix(5, 8, x.iter().map(|&v| v as f32).collect()).unwrap();
        let run = |x: &Tensor<f32>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let (y, _) = layer.self_attention(&mut g, &store, v, &[0..5]).unwrap();
            g.value(y).clone()
        };
        let y = run(&x);
        prop_assert!(y.all_finite());
        let px = Tensor::matrix(5, 8, perm.iter().flat_map(|&r| x.row_slice(r).to_vec()).collect()).unwrap();
        let py = run(&px);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((py.get(i, c) - y.get(r, c)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn backward_is_deterministic_and_linear() {
    let x = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let a = g.silu(v);
        let a = g.sum(a);
        let b = g.square(v);
        let b = g.mean(b);
        let out = match which {
            0 => a,
            1 => b,
            _ => g.add(a, b).unwrap(),
        };
        g.backward(out).unwrap().wrt(v)
    };
    assert_eq!(grad_of(2).data(), grad_of(2).data());
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..9 {
        assert!((gs.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
    }
}
