//! Latent diffusion core: noise schedule, forward process, training loss,
//! reverse sampler, and a configurable-depth U-Net denoiser with
//! cross-attention text conditioning.

mod codec;
mod denoiser;
pub(crate) mod loss;
mod sampler;
mod schedule;
mod text;

pub use codec::LatentCodec;
pub use denoiser::{
    sinusoidal_step_embedding, Block, DenoiserParams, EncoderCache, EncoderStack, SkipStack,
};
pub use loss::{dm_loss, DmBatchItem, DmLossOutput};
pub use sampler::ddpm_sample;
pub use schedule::{
    forward_step, make_schedule, posterior_mean, posterior_var, q_sample, NoiseSchedule,
    ScheduleConfig,
};
pub use text::{TextTable, Vocab, UNK_TOKEN};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token embeddings for one caption, `L` rows by `d_text` columns.
pub type TextCondition<T> = Array2<T>;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("latent codec: {0}")]
    Codec(String),
}

/// Architecture hyperparameters shared by the denoiser, the adapter, and the
/// condition encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder/decoder block count B.
    pub depth: usize,
    /// Channel width of every block.
    pub channels: usize,
    /// Cross-attention inner dimension.
    pub attn_dim: usize,
    /// Token embedding width.
    pub text_dim: usize,
    /// Latent channels produced by the codec.
    pub latent_channels: usize,
    /// Condition encoder hidden channels.
    pub cond_hidden: usize,
    /// Condition embedding channels (output of the condition encoder).
    pub cond_channels: usize,
    /// Spatial pool factor of the latent codec.
    pub latent_pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            channels: 8,
            attn_dim: 16,
            text_dim: 16,
            latent_channels: 1,
            cond_hidden: 4,
            cond_channels: 8,
            latent_pool: 4,
        }
    }
}

impl ModelConfig {
    /// Sinusoidal step-embedding width; fixed to the block channel width.
    pub fn step_dim(&self) -> usize {
        self.channels
    }
}
