//! Timeline-conditioned sound generation at desk scale.
//!
//! The crate covers the whole loop: WAV/spectral DSP, sound-event timeline
//! extraction, condition embeddings, a small latent diffusion model with a
//! zero-convolution time adapter, a per-frame timestamp detector, the
//! synchronization metric suite, and synthetic benchmark data.
//!
//! Core numerics are generic over the scalar type (f32/f64) via [`num::Real`];
//! concrete aliases for the common instantiations live at the crate root.

pub mod adapter;
pub mod conditioning;
pub mod data;
pub mod detector;
pub mod diffusion;
pub mod dsp;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod num;
pub mod pipeline;
pub mod timeline;

pub use num::Real;

/// f32 instantiations (training / generation speed).
pub type Waveform32 = dsp::Waveform<f32>;
pub type Mel32 = dsp::MelSpectrogram<f32>;
pub type Latent32 = ndarray::Array3<f32>;
pub type Denoiser32 = diffusion::DenoiserParams<f32>;
pub type Adapter32 = adapter::AdapterParams<f32>;
pub type Detector32 = detector::DetectorParams<f32>;
pub type Schedule32 = diffusion::NoiseSchedule<f32>;

/// f64 instantiations (gradient checks, statistics).
pub type Waveform64 = dsp::Waveform<f64>;
pub type Mel64 = dsp::MelSpectrogram<f64>;
pub type Latent64 = ndarray::Array3<f64>;
pub type Denoiser64 = diffusion::DenoiserParams<f64>;
pub type Adapter64 = adapter::AdapterParams<f64>;
pub type Detector64 = detector::DetectorParams<f64>;
pub type Schedule64 = diffusion::NoiseSchedule<f64>;
