//! Fixtures and the finite-difference suite shared by the gradient tests
//! and the acceptance run.

#![allow(dead_code)]

pub mod oracles;

use molf::autodiff::{grad_check, grad_check_params, Graph, ParamStore, Tensor, Var};
use molf::flow::{total_loss_graph, Decoder, FlowBatch, LossWeights};
use molf::moe::{load_balance_graph, route_graph};
use molf::vae::{kl_graph, GeneVae, VaeConfig};
use molf::velocity::{VelocityBatch, VelocityConfig, VelocityKind, VelocityNet};
use molf::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

pub fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Replace every parameter with random values so zero-initialized layers
/// do not hide gradient paths.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}


pub fn small_vae(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> GeneVae {
    let cfg = VaeConfig {
        gene_dim: 6,
        latent_dim: 3,
        tokens: 2,
        hidden: 4,
        heads: 2,
        layers: 1,
        beta: 0.1,
        decoder_hidden: vec![5],
        decoder_zero_init: false,
    };
    GeneVae::new(store, cfg, rng).unwrap()
}

pub fn flow_fixture(kind: VelocityKind, top_k: usize) -> (VelocityNet, ParamStore<f64>, FlowBatch<f64>, GeneVae, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut vstore = ParamStore::<f64>::new();
    let vae = small_vae(&mut vstore, &mut rng);
    randomize(&mut vstore, &mut rng, 0.4);
    vstore.freeze();
    let cfg = VelocityConfig {
        latent_dim: 3,
        cond_dim: 4,
        n_types: 2,
        hidden: 4,
        heads: 2,
        time_dim: 4,
        pe_enabled: true,
        pe_base: 100.0,
        backbone_self_attention: true,
        kind,
        experts: 3,
        top_k,
        expert_dim: 4,
        expert_heads: 2,
        ff_mult: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let net = VelocityNet::new(&mut store, cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.4);
    let n = 4;
    let vb = VelocityBatch {
        z_t: Tensor::zeros(&[n, 3]),
        t: vec![0.1, 0.35, 0.6, 0.9],
        cond: rand_tensor(n, 4, &mut rng),
        type_ids: Some(vec![0, 1, 1, 0]),
        coords: Some(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]),
        null_mask: vec![false, true, false, false],
        segments: vec![0..2, 2..4],
    };
    let batch = FlowBatch::new(
        vb,
        rand_tensor(n, 3, &mut rng),
        rand_tensor(n, 3, &mut rng),
        Some(rand_tensor(n, 6, &mut rng).map(f64::abs)),
    )
    .unwrap();
    (net, store, batch, vae, vstore)
}

fn x_error<F>(x: Tensor<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check(f, &x, STEP).unwrap().max_rel_error()
}

fn param_error<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let r = grad_check_params(store, f, STEP, 12).unwrap();
    assert!(!r.entries.is_empty());
    r.max_rel_error()
}

/// Max relative finite-difference error of every trainable loss.
pub fn trainable_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let vae = small_vae(&mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.4);
    let x = rand_tensor(4, 6, &mut rng).map(f64::abs);
    let noise = rand_tensor(4, 3, &mut rng);
    out.push(("vae loss".into(), param_error(&store, |g, s| vae.loss_graph(g, s, &x, Some(noise.clone())))));
    out.push(("vae loss at mean".into(), param_error(&store, |g, s| vae.loss_graph(g, s, &x, None))));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    out.push((
        "kl".into(),
        x_error(rand_tensor(3, 6, &mut rng), |g, v| {
            let mu = g.slice_cols(v, 0, 3)?;
            let ls = g.slice_cols(v, 3, 6)?;
            kl_graph(g, mu, ls)
        }),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = rand_tensor(5, 4, &mut rng).map(|v| 2.0 * v);
    let outs = rand_tensor(5, 4, &mut rng);
    for k in [1, 2, 3, 4] {
        let e = x_error(logits.clone(), |g, v| {
            let p = g.softmax_rows(v);
            let (w, sel) = route_graph(g, p, k)?;
            let slots: Vec<(usize, usize)> = sel
                .iter()
                .enumerate()
                .flat_map(|(r, s)| (0..s.len()).map(move |j| (r, j)))
                .collect();
            let picked = g.pick(w, &slots)?;
            let o: Vec<f64> = sel
                .iter()
                .enumerate()
                .flat_map(|(r, s)| s.iter().map(move |&e| (r, e)))
                .map(|(r, e)| outs.get(r, e))
                .collect();
            let o = g.constant(Tensor::matrix(slots.len(), 1, o)?);
            let y = g.mul(picked, o)?;
            Ok(g.sum(y))
        });
        out.push((format!("top-{k} composed output wrt logits"), e));
    }
    out.push((
        "load balance".into(),
        x_error(logits, |g, v| {
            let p = g.softmax_rows(v);
            load_balance_graph(g, p)
        }),
    ));

    for (kind, k) in [(VelocityKind::Moe, 2), (VelocityKind::Moe, 1), (VelocityKind::Dense, 1)] {
        let (net, store, batch, vae, vstore) = flow_fixture(kind, k);
        let dec = Decoder { vae: &vae, store: &vstore };
        let only = |flow: f64, gene: f64, aux: f64| LossWeights { flow, gene, aux };
        for (name, w) in [
            ("cfm", only(1.0, 0.0, 0.0)),
            ("gene", only(0.0, 1.0, 0.0)),
            ("aux", only(0.0, 0.0, 1.0)),
            ("total", only(1.0, 1.0, 1.0)),
        ] {
            if kind == VelocityKind::Dense && name == "aux" {
                continue;
            }
            let e = param_error(&store, |g, s| Ok(total_loss_graph(g, &net, s, &batch, Some(&dec), &w)?.total));
            out.push((format!("{kind:?} k={k} {name}"), e));
        }
    }
    out
}
