//! AdamW with decoupled weight decay and per-group learning rates.

use super::params::{ParamGroup, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Learning rate for [`ParamGroup::Gate`] parameters.
    pub gate_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            gate_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            gate_lr: lr,
            ..Default::default()
        }
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr,
            ParamGroup::Gate => self.gate_lr,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// First and second moments per parameter, kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let state = store
            .entries()
            .iter()
            .map(|e| Moments {
                m: vec![0.0; e.value.numel()],
                v: vec![0.0; e.value.numel()],
                step: 0,
            })
            .collect();
        AdamW { config, state }
    }

    pub fn step_count(&self, index: usize) -> u64 {
        self.state[index].step
    }

    /// Apply one update to every parameter of `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        ensure!(
            grads.len() == store.len() && self.state.len() == store.len(),
            "adamw: {} gradients for {} parameters",
            grads.len(),
            store.len()
        );
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            ensure!(
                g.shape() == store.value(id).shape(),
                "adamw: gradient shape {:?} vs parameter {} {:?}",
                g.shape(),
                store.name(id),
                store.value(id).shape()
            );
            let lr = c.lr_for(store.group(id));
            let st = &mut self.state[id.0];
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let p = store.value_mut(id).data_mut();
            for (j, (pv, gv)) in p.iter_mut().zip(g.data()).enumerate() {
                let gv = gv.to_f64_lossy();
                st.m[j] = c.beta1 * st.m[j] + (1.0 - c.beta1) * gv;
                st.v[j] = c.beta2 * st.v[j] + (1.0 - c.beta2) * gv * gv;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                let mut x = pv.to_f64_lossy();
                x *= 1.0 - lr * c.weight_decay;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *pv = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), ParamGroup::Backbone);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let p = s.value(super::super::ParamId(0)).item();
        assert!((p + 0.1).abs() < 1e-8, "{p}");
        assert_eq!(opt.step_count(0), 1);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = one_param(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(s.value(super::super::ParamId(0)).item(), 0.7);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut s = one_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert!((s.value(super::super::ParamId(0)).item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(opt.step(&mut s, &[Tensor::row(vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn gate_group_uses_gate_lr() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::scalar(0.0), ParamGroup::Backbone);
        s.add("g", Tensor::scalar(0.0), ParamGroup::Gate);
        let cfg = AdamWConfig {
            lr: 0.1,
            gate_lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::scalar(1.0), Tensor::scalar(1.0)]).unwrap();
        let v: Vec<f64> = s.entries().iter().map(|e| e.value.item()).collect();
        assert!((v[0] + 0.1).abs() < 1e-8);
        assert!((v[1] + 0.01).abs() < 1e-8);
    }
}
