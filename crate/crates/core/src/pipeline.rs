//! End-to-end generation: prompt + timeline condition -> latent -> mel ->
//! magnitude -> Griffin-Lim waveform.

use ndarray::Array3;
use thiserror::Error;

use crate::adapter::AdapterParams;
use crate::conditioning::{ConditionEncoder, ConditionSpec, ConditioningError};
use crate::diffusion::{
    ddpm_sample, DenoiserParams, DiffusionError, LatentCodec, NoiseSchedule, TextTable,
};
use crate::dsp::{
    denormalize_mel, griffin_lim, mel_to_magnitude, DspError, MelNorm, SpectralConfig, Waveform,
};
use crate::num::Real;
use crate::timeline::ActivityConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error("condition grid {rows}x{cols} does not map onto the latent pool {pool}")]
    BadConditionShape {
        rows: usize,
        cols: usize,
        pool: usize,
    },
}

/// Fixed context for turning latents into audio.
#[derive(Debug, Clone)]
pub struct GenContext {
    pub dsp: SpectralConfig,
    pub codec: LatentCodec,
    /// Corpus-level normalization statistics used to invert per-spectrogram
    /// normalization at inference, where no source spectrogram exists.
    pub denorm: MelNorm,
    pub griffin_lim_iters: usize,
    pub activity: ActivityConfig,
}

impl GenContext {
    pub fn new(dsp: SpectralConfig, codec: LatentCodec, denorm: MelNorm) -> Self {
        Self {
            dsp,
            codec,
            denorm,
            griffin_lim_iters: 32,
            activity: ActivityConfig::default(),
        }
    }
}

/// Mean of per-clip normalization statistics; a stable corpus-level stand-in
/// for the per-spectrogram (min, max) at inference time.
pub fn mean_norm(norms: &[MelNorm]) -> MelNorm {
    assert!(!norms.is_empty());
    let n = norms.len() as f64;
    MelNorm {
        min: norms.iter().map(|m| m.min).sum::<f64>() / n,
        max: norms.iter().map(|m| m.max).sum::<f64>() / n,
    }
}

/// Decodes a sampled latent into a waveform.
pub fn latent_to_audio<T: Real>(
    z: &Array3<T>,
    mel_frame_rate: f64,
    seed: u64,
    ctx: &GenContext,
) -> Result<Waveform<T>, PipelineError> {
    let mel = ctx.codec.decode(z, mel_frame_rate);
    let linear = denormalize_mel(&mel, &ctx.denorm);
    let mag = mel_to_magnitude(&linear, &ctx.dsp)?;
    Ok(griffin_lim(&mag, &ctx.dsp, ctx.griffin_lim_iters, seed)?)
}

/// Full sampling path. The condition grid fixes the latent shape; without an
/// adapter its contents are ignored. The rng stream depends only on `seed`.
#[allow(clippy::too_many_arguments)]
pub fn generate_clip<T: Real>(
    base: &DenoiserParams<T>,
    adapter: Option<(&AdapterParams<T>, &ConditionEncoder<T>)>,
    text: &TextTable<T>,
    schedule: &NoiseSchedule<T>,
    cond: &ConditionSpec<T>,
    tokens: &[usize],
    seed: u64,
    ctx: &GenContext,
) -> Result<Waveform<T>, PipelineError> {
    let pool = ctx.codec.pool;
    if cond.n_mels() % pool != 0 || cond.n_frames() % pool != 0 {
        return Err(PipelineError::BadConditionShape {
            rows: cond.n_mels(),
            cols: cond.n_frames(),
            pool,
        });
    }
    let shape = (
        base.cfg.latent_channels,
        cond.n_mels() / pool,
        cond.n_frames() / pool,
    );
    let tau = text.embed(tokens);
    let z = match adapter {
        Some((ada, enc)) => {
            let (a_ct, _) = enc.encode(cond)?;
            ddpm_sample(base, &tau, Some((ada, &a_ct)), schedule, seed, shape)
        }
        None => ddpm_sample(base, &tau, None, schedule, seed, shape),
    };
    latent_to_audio(&z, cond.frame_rate, seed, ctx)
}
