//! Guided Euler sampling from Gaussian noise.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{ensure, MolfError, Result};
use crate::flow::Decoder;
use crate::moe::GateDecision;
use crate::velocity::{VelocityBatch, VelocityNet};

/// `v_uncond + w (v_cond - v_uncond)`; `w = 1` and `w = 0` return an input unchanged.
pub fn cfg_velocity<T: Real>(v_cond: &[T], v_uncond: &[T], w: T) -> Result<Vec<T>> {
    ensure!(v_cond.len() == v_uncond.len(), "velocity widths {} and {} differ", v_cond.len(), v_uncond.len());
    ensure!(w >= T::zero(), "guidance scale {w:?} is negative");
    if w == T::one() {
        return Ok(v_cond.to_vec());
    }
    if w == T::zero() {
        return Ok(v_uncond.to_vec());
    }
    Ok(v_cond.iter().zip(v_uncond).map(|(&c, &u)| u + w * (c - u)).collect())
}

/// States visited by the integrator, `t = i / steps` for `i = 0..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<(f64, Tensor<T>)>,
}

impl<T: Real> Trajectory<T> {
    /// Rows `spot, t, z_0, ...`, one per spot and state.
    pub fn to_csv(&self, spot_ids: &[u64]) -> Result<String> {
        let Some((_, first)) = self.states.first() else {
            return Ok(String::new());
        };
        ensure!(spot_ids.len() == first.rows(), "{} spot ids for {} rows", spot_ids.len(), first.rows());
        let mut s = String::from("spot,t");
        for j in 0..first.cols() {
            write!(s, ",z_{j}").unwrap();
        }
        s.push('\n');
        for (r, id) in spot_ids.iter().enumerate() {
            for (t, z) in &self.states {
                write!(s, "{id},{t}").unwrap();
                for v in z.row_slice(r) {
                    write!(s, ",{}", v.to_f64_lossy()).unwrap();
                }
                s.push('\n');
            }
        }
        Ok(s)
    }
}

/// Forward Euler with step `1 / steps`: `z <- z + dt * v(z, t)`.
pub fn euler_integrate<T, F>(z0: Tensor<T>, mut velocity_fn: F, steps: usize) -> Result<(Tensor<T>, Trajectory<T>)>
where
    T: Real,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    ensure!(steps >= 1, "Euler integration needs at least one step");
    let dt = T::from_f64_lossy(1.0 / steps as f64);
    let mut z = z0;
    let mut states = vec![(0.0, z.clone())];
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let v = velocity_fn(&z, t)?;
        ensure!(v.shape() == z.shape(), "velocity shape {:?} vs state {:?}", v.shape(), z.shape());
        if !v.all_finite() {
            return Err(MolfError::Numeric(format!("non-finite velocity at t = {t}")));
        }
        if steps == 1 {
            for (a, &b) in z.data_mut().iter_mut().zip(v.data()) {
                *a = *a + b;
            }
        } else {
            for (a, &b) in z.data_mut().iter_mut().zip(v.data()) {
                *a = *a + dt * b;
            }
        }
        states.push(((i + 1) as f64 / steps as f64, z.clone()));
    }
    Ok((z, Trajectory { states }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub w: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        SampleRequest {
            w: 1.0,
            steps: 1,
            seed: 0,
        }
    }
}

/// Source noise for one spot, independent of every other spot.
pub fn spot_noise(seed: u64, spot: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spot);
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

pub fn noise_matrix(seed: u64, spot_ids: &[u64], dim: usize) -> Tensor<f32> {
    let data = spot_ids.iter().flat_map(|&s| spot_noise(seed, s, dim)).collect();
    Tensor::matrix(spot_ids.len(), dim, data).expect("sized")
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub latent: Tensor<f32>,
    /// Decoded expression, when a decoder was given.
    pub expression: Option<Tensor<f32>>,
    pub trajectory: Trajectory<f32>,
    /// Gate decisions of the conditional pass at `t = 0` (mixture networks).
    pub initial_routing: Vec<GateDecision>,
    pub forward_calls: usize,
}

/// Sample one latent per row of `inputs` (its `z_t` and `t` are ignored).
///
/// With `w = 1` only the conditional pass runs; otherwise every step runs a
/// conditional and a null-conditioned pass.
pub fn generate(
    req: &SampleRequest,
    net: &VelocityNet,
    store: &ParamStore<f32>,
    inputs: &VelocityBatch<f32>,
    spot_ids: &[u64],
    decoder: Option<&Decoder<f32>>,
) -> Result<Generated> {
    ensure!(req.w >= 0.0 && req.w.is_finite(), "guidance scale {} must be finite and non-negative", req.w);
    ensure!(spot_ids.len() == inputs.rows(), "{} spot ids for {} rows", spot_ids.len(), inputs.rows());
    let z0 = noise_matrix(req.seed, spot_ids, net.config.latent_dim);
    let mut calls = 0usize;
    let mut initial_routing = Vec::new();
    let cond_inputs = VelocityBatch {
        null_mask: vec![false; inputs.rows()],
        ..inputs.clone()
    };
    let (z1, trajectory) = euler_integrate(
        z0,
        |z, t| {
            let b = cond_inputs.with_state(z.clone(), t);
            let (vc, dec) = net.eval(store, &b)?;
            calls += 1;
            if t == 0.0 {
                initial_routing = dec;
            }
            if req.w == 1.0 {
                return Ok(vc);
            }
            let (vu, _) = net.eval(store, &b.nulled())?;
            calls += 1;
            let v = cfg_velocity(vc.data(), vu.data(), req.w as f32)?;
            Tensor::matrix(vc.rows(), vc.cols(), v)
        },
        req.steps,
    )?;
    let expression = match decoder {
        Some(d) => Some(d.vae.decode(d.store, &z1)?),
        None => None,
    };
    Ok(Generated {
        latent: z1,
        expression,
        trajectory,
        initial_routing,
        forward_calls: calls,
    })
}
