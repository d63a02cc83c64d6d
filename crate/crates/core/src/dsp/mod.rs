//! Deterministic audio I/O and spectral transforms: WAV read/write, STFT,
//! mel filterbank, normalization, Griffin-Lim reconstruction.
//!
//! All operations are pure functions over immutable values; anything seeded
//! is bit-reproducible for a fixed seed.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, spectral_convergence};
pub use mel::{
    denormalize_mel, mel_filterbank, mel_spectrogram, mel_to_magnitude, normalize_mel, MelNorm,
};
pub use stft::{hann_window, stft_magnitude};
pub use wav::{load_wav, write_wav, WavEncoding};

use ndarray::Array2;
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed wav file: {0}")]
    MalformedWav(String),
    #[error("unsupported wav codec: {0}")]
    UnsupportedCodec(String),
    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("invalid spectral config: {0}")]
    InvalidConfig(String),
    #[error("spectrogram already normalized")]
    AlreadyNormalized,
    #[error("expected a denormalized spectrogram")]
    NotDenormalized,
    #[error("griffin-lim needs at least one iteration")]
    NoIterations,
    #[error("empty waveform")]
    EmptyWaveform,
}

/// Time-domain audio samples in [-1, 1] at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample_rate must be positive");
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// STFT / mel analysis parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "hop must satisfy 0 < hop <= n_fft (hop={}, n_fft={})",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be >= 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 <= f_min < f_max <= {} (f_min={}, f_max={})",
                nyquist, self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    /// Number of FFT magnitude bins.
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Mel frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Mel-frequency magnitude grid, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T> {
    pub values: Array2<T>,
    pub frame_rate: f64,
    pub normalized: bool,
}

impl<T: Real> MelSpectrogram<T> {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}
