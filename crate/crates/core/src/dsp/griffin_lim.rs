//! Iterative phase reconstruction from magnitude spectrograms
//! (fast Griffin-Lim with momentum).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::stft::{istft, stft_complex};
use super::{DspError, SpectralConfig, Waveform};
use crate::num::Real;

/// Momentum used by the accelerated update.
pub const GRIFFIN_LIM_MOMENTUM: f64 = 0.99;

/// Reconstructs a waveform whose STFT magnitude approximates `mag`
/// (`n_fft/2 + 1` bins by `n_frames` columns). Phase is initialized from
/// seeded uniform noise, so the result is deterministic for a fixed seed.
pub fn griffin_lim<T: Real>(
    mag: &Array2<T>,
    cfg: &SpectralConfig,
    iterations: usize,
    seed: u64,
) -> Result<Waveform<T>, DspError> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(DspError::NoIterations);
    }
    assert_eq!(mag.nrows(), cfg.n_bins(), "bin count mismatch");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let momentum = T::from_f64_c(GRIFFIN_LIM_MOMENTUM / (1.0 + GRIFFIN_LIM_MOMENTUM));
    let tiny = T::from_f64_c(1e-16);

    let mut estimate = mag.mapv(|m| {
        let theta: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        Complex::from_polar(m, T::from_f64_c(theta))
    });
    let mut prev: Option<Array2<Complex<T>>> = None;

    for _ in 0..iterations {
        let inverse = istft(&estimate, cfg);
        let rebuilt = stft_complex(
            &Waveform::new(inverse, cfg.sample_rate),
            cfg,
        )?;
        let mut update = rebuilt.clone();
        if let Some(p) = prev {
            update.zip_mut_with(&p, |u, &pv| *u = *u - pv * momentum);
        }
        prev = Some(rebuilt);
        estimate = ndarray::Zip::from(&update)
            .and(mag)
            .map_collect(|&u, &m| {
                let norm = u.norm();
                if norm > tiny {
                    u / norm * m
                } else {
                    Complex::new(m, T::zero())
                }
            });
    }

    Ok(Waveform::new(istft(&estimate, cfg), cfg.sample_rate))
}

/// Spectral convergence error: Frobenius norm of (|STFT(w)| - mag) over the
/// Frobenius norm of mag.
pub fn spectral_convergence<T: Real>(
    w: &Waveform<T>,
    mag: &Array2<T>,
    cfg: &SpectralConfig,
) -> Result<f64, DspError> {
    let rebuilt = stft_complex(w, cfg)?.mapv(|c| c.norm());
    let frames = rebuilt.ncols().min(mag.ncols());
    let mut num = 0.0;
    let mut den = 0.0;
    for f in 0..frames {
        for b in 0..mag.nrows() {
            let d = (rebuilt[(b, f)] - mag[(b, f)]).to_f64_c();
            num += d * d;
            den += mag[(b, f)].to_f64_c().powi(2);
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::stft_magnitude;

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> Waveform<f64> {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn more_iterations_reduce_spectral_error() {
        let cfg = SpectralConfig::default();
        let w = sine(440.0, 16_000, 8_192, 0.5);
        let mag = stft_magnitude(&w, &cfg).unwrap();
        let one = griffin_lim(&mag, &cfg, 1, 7).unwrap();
        let many = griffin_lim(&mag, &cfg, 32, 7).unwrap();
        let e1 = spectral_convergence(&one, &mag, &cfg).unwrap();
        let e32 = spectral_convergence(&many, &mag, &cfg).unwrap();
        assert!(e32 < e1, "e32={e32} e1={e1}");
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let cfg = SpectralConfig::default();
        let mag = Array2::zeros((cfg.n_bins(), 12));
        let w: Waveform<f64> = griffin_lim(&mag, &cfg, 4, 1).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = SpectralConfig::default();
        let w = sine(330.0, 16_000, 4_096, 0.4);
        let mag = stft_magnitude(&w, &cfg).unwrap();
        let a = griffin_lim(&mag, &cfg, 8, 42).unwrap();
        let b = griffin_lim(&mag, &cfg, 8, 42).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = SpectralConfig::default();
        let mag = Array2::zeros((cfg.n_bins(), 4));
        assert!(matches!(
            griffin_lim::<f64>(&mag, &cfg, 0, 1),
            Err(DspError::NoIterations)
        ));
    }
}
