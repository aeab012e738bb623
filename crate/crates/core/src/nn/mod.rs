//! Network building blocks shared by both stages.

mod attention;
mod encoding;
mod linear;

pub use attention::{AttentionConfig, AttentionLayer};
pub use encoding::{sinusoidal_pe, time_embed, PositionalEncoding, TimeEmbedding};
pub use linear::{Init, LayerNorm, Linear, Mlp};
