use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zero,
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::FanIn => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                (
                    store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], bound, group, rng),
                    store.add_uniform(format!("{name}.b"), &[1, out_dim], bound, group, rng),
                )
            }
            Init::Zero => (
                store.add(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]), group),
                store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]), group),
            ),
        };
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        ensure!(
            g.value(x).cols() == self.in_dim,
            "linear expects width {}, got {}",
            self.in_dim,
            g.value(x).cols()
        );
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], T::one()), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), group),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64_lossy(1e-5))
    }
}

/// Stack of linear layers with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        last_init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::FanIn };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    init,
                    group,
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}
