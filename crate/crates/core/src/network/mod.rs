//! The conditional denoiser and its building blocks.

mod attention;
mod blocks;
mod encoder;
pub mod gradcheck;
mod layers;
mod model;
mod params;

pub use attention::{positional_encode, AttentionOutput, AttnBlock, AttnBlockOutput, MultiHeadAttention};
pub use blocks::ConvBlock;
pub use encoder::{Encoder, StyleFeatureMap, StyleNet};
pub use layers::{AffineCondition, Conv1d, Conv2d, Linear, NoiseEmbedding};
pub use model::{
    CrossAttention, Denoiser, DenoiserInput, ForwardVars, ModelConfig, Prediction, StyleInput,
};
pub use params::{Ctx, Init, ParamId, ParamStore};
