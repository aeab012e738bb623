//! Central finite-difference verification of analytic gradients (64-bit).

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{MolfError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, g: &mut Graph<f64>, x: Var) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let out = f(g, x)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(MolfError::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(MolfError::Numeric("function is non-finite at a probed point".into()));
    }
    Ok(v)
}

/// Compare the graph gradient of `f` at `x` with central differences of width `2 * step`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    let analytic = g.backward(out)?.wrt(xv);

    let mut report = GradCheckReport::default();
    for i in 0..x.numel() {
        let probe = |delta: f64| -> Result<f64> {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let mut g = Graph::new();
            let v = g.leaf(xp);
            eval_scalar(&f, &mut g, v)
        };
        let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
        let a = analytic.data()[i];
        report.entries.push(GradCheckEntry {
            label: "x".into(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(report)
}

/// Finite-difference check over the parameters of `store`.
///
/// `f` builds the scalar loss from the store. At most `max_per_param` elements
/// of each parameter are probed, evenly spaced, so large tensors stay cheap.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(MolfError::Numeric("loss is non-finite at a probed point".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut probe_store = store.clone();
    for id in store.ids() {
        let analytic = grads.param(store, id);
        let n = analytic.numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let numeric = {
                let orig = store.value(id).data()[i];
                set(&mut probe_store, id, i, orig + step);
                let up = eval(&probe_store)?;
                set(&mut probe_store, id, i, orig - step);
                let down = eval(&probe_store)?;
                set(&mut probe_store, id, i, orig);
                (up - down) / (2.0 * step)
            };
            let a = analytic.data()[i];
            report.entries.push(GradCheckEntry {
                label: store.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore<f64>, id: ParamId, i: usize, v: f64) {
    store.value_mut(id).data_mut()[i] = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_at_two() {
        let r = grad_check(
            |g, x| {
                let sq = g.square(x);
                let cube = g.mul(sq, x)?;
                Ok(g.sum(cube))
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        let e = &r.entries[0];
        assert!((e.analytic - 12.0).abs() < 1e-12);
        assert!(e.rel_error < 1e-6);
    }

    #[test]
    fn norm_squared_at_origin() {
        let r = grad_check(
            |g, x| {
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            &Tensor::row(vec![0.0, 0.0, 0.0]),
            1e-5,
        )
        .unwrap();
        for e in &r.entries {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // log is undefined for x - step < 0 at x = 0
        let r = grad_check(
            |g, x| {
                let s = g.add_scalar(x, 1e-7);
                let l = g.log(s);
                Ok(g.sum(l))
            },
            &Tensor::scalar(0.0),
            1e-5,
        );
        assert!(matches!(r, Err(MolfError::Numeric(_))));
    }
}
