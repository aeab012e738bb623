//! Two-stage latent generative modelling: a gene-expression VAE and a
//! conditional flow-matching model with a sparse mixture-of-experts velocity
//! field, plus sampling, evaluation and guidance-scale selection.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod fixture;
pub mod flow;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod selection;
pub mod toy;
pub mod vae;
pub mod velocity;

pub use error::{MolfError, Result};
