//! Builds the condition spectrogram from a binary timeline (optionally
//! merged with a reference mel) and encodes it into the time-condition
//! embedding consumed by the adapter.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::ModelConfig;
use crate::dsp::MelSpectrogram;
use crate::nn::{silu, silu_backward, Conv2d, Conv2dCache, Param, ParamModel};
use crate::num::Real;
use crate::timeline::BinaryTimeline;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reference mel must be normalized")]
    RefNotNormalized,
    #[error("spec shape {rows}x{cols} not divisible by encoder factor {factor}")]
    NotDivisible {
        rows: usize,
        cols: usize,
        factor: usize,
    },
}

/// Condition grid in [0, 1] with the same shape as the target mel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec<T> {
    pub values: Array2<T>,
    pub frame_rate: f64,
}

impl<T: Real> ConditionSpec<T> {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// How the condition grid is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    /// Columns are all-ones where the timeline bit is set (inference
    /// default: no source audio exists).
    MaskOnly,
    /// Elementwise max of a normalized reference mel and the timeline mask
    /// (training-side construction).
    MaxWithMel,
}

/// Builds the condition grid. The timeline must already be resampled to the
/// target mel frame count; `reference` is required for
/// [`ConditionMode::MaxWithMel`].
pub fn build_condition<T: Real>(
    t: &BinaryTimeline,
    n_mels: usize,
    mode: ConditionMode,
    reference: Option<&MelSpectrogram<T>>,
) -> Result<ConditionSpec<T>, ConditioningError> {
    let n_frames = t.len();
    let mut values = Array2::zeros((n_mels, n_frames));
    match mode {
        ConditionMode::MaskOnly => {
            for (j, &bit) in t.bits.iter().enumerate() {
                if bit == 1 {
                    for i in 0..n_mels {
                        values[(i, j)] = T::one();
                    }
                }
            }
        }
        ConditionMode::MaxWithMel => {
            let reference = reference.ok_or_else(|| {
                ConditioningError::ShapeMismatch("max-with-mel needs a reference mel".into())
            })?;
            if !reference.normalized {
                return Err(ConditioningError::RefNotNormalized);
            }
            if reference.n_mels() != n_mels || reference.n_frames() != n_frames {
                return Err(ConditioningError::ShapeMismatch(format!(
                    "reference {}x{} vs target {}x{}",
                    reference.n_mels(),
                    reference.n_frames(),
                    n_mels,
                    n_frames
                )));
            }
            for j in 0..n_frames {
                let bit = if t.bits[j] == 1 { T::one() } else { T::zero() };
                for i in 0..n_mels {
                    values[(i, j)] = reference.values[(i, j)].max(bit);
                }
            }
        }
    }
    Ok(ConditionSpec {
        values,
        frame_rate: t.frame_rate,
    })
}

/// Condition encoder: either two stride-2 convolutions with SiLU (learned,
/// trained jointly with the adapter) or a parameter-free average pool used
/// by deterministic tests.
#[derive(Debug, Clone)]
pub enum ConditionEncoder<T> {
    Learned(LearnedCondEncoder<T>),
    Pooling { factor: usize },
}

#[derive(Debug, Clone)]
pub struct LearnedCondEncoder<T> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub enum CondEncCache<T> {
    Learned {
        c1: Conv2dCache<T>,
        pre1: Array3<T>,
        c2: Conv2dCache<T>,
        pre2: Array3<T>,
    },
    Pooling,
}

impl<T: Real> ConditionEncoder<T> {
    pub fn learned(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::Learned(LearnedCondEncoder {
            c1: Conv2d::new(1, cfg.cond_hidden, 3, 2, 1, rng),
            c2: Conv2d::new(cfg.cond_hidden, cfg.cond_channels, 3, 2, 1, rng),
        })
    }

    pub fn pooling(factor: usize) -> Self {
        Self::Pooling { factor }
    }

    /// Spatial reduction applied to the condition grid.
    pub fn downsample_factor(&self) -> usize {
        match self {
            Self::Learned(_) => 4,
            Self::Pooling { factor } => *factor,
        }
    }

    /// Embedding channel count.
    pub fn out_channels(&self) -> usize {
        match self {
            Self::Learned(enc) => enc.c2.c_out(),
            Self::Pooling { .. } => 1,
        }
    }

    /// Deterministic forward pass; the output time length equals
    /// `n_frames / downsample_factor`.
    pub fn encode(
        &self,
        spec: &ConditionSpec<T>,
    ) -> Result<(Array3<T>, CondEncCache<T>), ConditioningError> {
        let factor = self.downsample_factor();
        if spec.n_mels() % factor != 0 || spec.n_frames() % factor != 0 {
            return Err(ConditioningError::NotDivisible {
                rows: spec.n_mels(),
                cols: spec.n_frames(),
                factor,
            });
        }
        let x = spec
            .values
            .clone()
            .into_shape((1, spec.n_mels(), spec.n_frames()))
            .unwrap();
        match self {
            Self::Learned(enc) => {
                let (pre1, c1_cache) = enc.c1.forward(&x);
                let h1 = silu(&pre1);
                let (pre2, c2_cache) = enc.c2.forward(&h1);
                let out = silu(&pre2);
                Ok((
                    out,
                    CondEncCache::Learned {
                        c1: c1_cache,
                        pre1,
                        c2: c2_cache,
                        pre2,
                    },
                ))
            }
            Self::Pooling { factor } => {
                let p = *factor;
                let (fm, fr) = (spec.n_mels() / p, spec.n_frames() / p);
                let norm = T::from_usize_c(p * p);
                let mut out = Array3::zeros((1, fm, fr));
                for i in 0..fm {
                    for j in 0..fr {
                        let mut acc = T::zero();
                        for di in 0..p {
                            for dj in 0..p {
                                acc += x[(0, i * p + di, j * p + dj)];
                            }
                        }
                        out[(0, i, j)] = acc / norm;
                    }
                }
                Ok((out, CondEncCache::Pooling))
            }
        }
    }

    /// Accumulates parameter gradients for the learned variant. The pooling
    /// variant has no parameters.
    pub fn backward(&mut self, cache: &CondEncCache<T>, g_out: &Array3<T>) {
        if let (Self::Learned(enc), CondEncCache::Learned { c1, pre1, c2, pre2 }) = (self, cache) {
            let g_pre2 = silu_backward(pre2, g_out);
            let g_h1 = enc.c2.backward(c2, &g_pre2);
            let g_pre1 = silu_backward(pre1, &g_h1);
            enc.c1.backward(c1, &g_pre1);
        }
    }
}

impl<T: Real> ParamModel<T> for ConditionEncoder<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Self::Learned(enc) = self {
            enc.c1.visit("cond.c1", f);
            enc.c2.visit("cond.c2", f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Self::Learned(enc) = self {
            enc.c1.visit_ref("cond.c1", f);
            enc.c2.visit_ref("cond.c2", f);
        }
    }

    fn model_name(&self) -> &'static str {
        "condition_encoder"
    }
}
