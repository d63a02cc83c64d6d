//! Triangular mel filterbank, mel spectrograms, normalization, and the
//! approximate filterbank inverse used before phase reconstruction.

use ndarray::Array2;

use super::{stft::stft_magnitude, DspError, MelSpectrogram, SpectralConfig, Waveform};
use crate::num::Real;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, `n_mels` rows by `n_fft/2 + 1` columns. Triangles
/// peak at 1 and are spaced evenly on the mel scale between `f_min` and
/// `f_max`.
pub fn mel_filterbank<T: Real>(cfg: &SpectralConfig) -> Result<Array2<T>, DspError> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (center - lo).max(f64::EPSILON);
        let fall = (hi - center).max(f64::EPSILON);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = ((f - lo) / rise).min((hi - f) / fall).max(0.0);
            if w > 0.0 {
                fb[(m, b)] = T::from_f64_c(w);
            }
        }
    }
    Ok(fb)
}

/// Center frequencies of the filterbank rows, in Hz.
pub fn mel_center_frequencies(cfg: &SpectralConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Magnitude STFT multiplied by the triangular filterbank.
pub fn mel_spectrogram<T: Real>(
    w: &Waveform<T>,
    cfg: &SpectralConfig,
) -> Result<MelSpectrogram<T>, DspError> {
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank::<T>(cfg)?;
    Ok(MelSpectrogram {
        values: fb.dot(&mag),
        frame_rate: cfg.frame_rate(),
        normalized: false,
    })
}

/// Normalization statistics recorded alongside a normalized spectrogram so
/// the mapping can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelNorm {
    /// Minimum of log(1 + m) over the grid.
    pub min: f64,
    /// Maximum of log(1 + m) over the grid.
    pub max: f64,
}

/// Log-compresses with log(1 + m) and min-max scales the grid to [0, 1].
/// A constant grid maps to all zeros.
pub fn normalize_mel<T: Real>(
    m: &MelSpectrogram<T>,
) -> Result<(MelSpectrogram<T>, MelNorm), DspError> {
    if m.normalized {
        return Err(DspError::AlreadyNormalized);
    }
    let logv = m.values.mapv(|v| v.to_f64_c().ln_1p());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in logv.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    let values = if range > 0.0 {
        logv.mapv(|v| T::from_f64_c((v - min) / range))
    } else {
        Array2::zeros(m.values.raw_dim())
    };
    Ok((
        MelSpectrogram {
            values,
            frame_rate: m.frame_rate,
            normalized: true,
        },
        MelNorm { min, max },
    ))
}

/// Inverts [`normalize_mel`] back to the linear magnitude domain.
pub fn denormalize_mel<T: Real>(m: &MelSpectrogram<T>, norm: &MelNorm) -> MelSpectrogram<T> {
    let range = norm.max - norm.min;
    let values = m.values.mapv(|v| {
        let log = v.to_f64_c() * range + norm.min;
        T::from_f64_c(log.exp_m1().max(0.0))
    });
    MelSpectrogram {
        values,
        frame_rate: m.frame_rate,
        normalized: false,
    }
}

/// Approximate inverse of the filterbank: weight-normalized transpose
/// initialization refined by multiplicative non-negative least squares
/// updates. Returns a magnitude spectrogram, `n_fft/2 + 1` bins by
/// `n_frames` columns.
pub fn mel_to_magnitude<T: Real>(
    m: &MelSpectrogram<T>,
    cfg: &SpectralConfig,
) -> Result<Array2<T>, DspError> {
    if m.normalized {
        return Err(DspError::NotDenormalized);
    }
    let fb = mel_filterbank::<T>(cfg)?;
    let n_bins = cfg.n_bins();
    let n_frames = m.n_frames();
    let tiny = T::from_f64_c(1e-12);

    // Transpose with per-bin weight renormalization.
    let col_sums: Vec<T> = (0..n_bins)
        .map(|b| fb.column(b).iter().copied().sum::<T>().max(tiny))
        .collect();
    let fb_t = fb.t().to_owned();
    let mut mag = fb_t.dot(&m.values);
    for (b, mut row) in mag.outer_iter_mut().enumerate() {
        row.mapv_inplace(|v| v / col_sums[b]);
    }

    // Multiplicative NNLS refinement of fb * mag ~= m.
    const REFINE_ITERS: usize = 20;
    let numer = fb_t.dot(&m.values);
    for _ in 0..REFINE_ITERS {
        let denom = fb_t.dot(&fb.dot(&mag));
        for ((i, j), v) in mag.indexed_iter_mut() {
            *v = *v * numer[(i, j)] / denom[(i, j)].max(tiny);
        }
    }
    let _ = n_frames;
    Ok(mag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> Waveform<f64> {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn filterbank_covers_passband() {
        let cfg = SpectralConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        assert!(fb.iter().all(|&w| w >= 0.0));
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        for b in 0..cfg.n_bins() {
            let f = b as f64 * bin_hz;
            if f > cfg.f_min + bin_hz && f < cfg.f_max - bin_hz {
                let total: f64 = fb.column(b).sum();
                assert!(total > 0.0, "bin {b} at {f} Hz has no mel coverage");
            }
        }
    }

    #[test]
    fn sine_energy_lands_on_nearest_center() {
        let cfg = SpectralConfig::default();
        let w = sine(440.0, 16_000, 16_384, 0.5);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        let mean: Vec<f64> = (0..mel.n_mels())
            .map(|m| mel.values.row(m).mean().unwrap())
            .collect();
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let centers = mel_center_frequencies(&cfg);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 440.0)
                    .abs()
                    .partial_cmp(&(b.1 - 440.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn silence_maps_to_zero_grid() {
        let cfg = SpectralConfig::default();
        let w = Waveform::new(vec![0.0f64; 8_192], 16_000);
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert!(mel.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_is_deterministic() {
        let cfg = SpectralConfig::default();
        let w = sine(440.0, 16_000, 8_192, 0.3);
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn mel_is_linear_in_magnitude() {
        let cfg = SpectralConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        let mag = Array2::from_shape_fn((cfg.n_bins(), 7), |(i, j)| ((i * 7 + j) % 13) as f64);
        let lhs = fb.dot(&mag.mapv(|v| 2.5 * v));
        let rhs = fb.dot(&mag).mapv(|v| 2.5 * v);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_constant_grid_is_zero() {
        let m = MelSpectrogram {
            values: Array2::from_elem((4, 5), 3.0f64),
            frame_rate: 62.5,
            normalized: false,
        };
        let (n, norm) = normalize_mel(&m).unwrap();
        assert!(n.values.iter().all(|&v| v == 0.0));
        assert_eq!(norm.min, norm.max);
        // Denormalizing recovers the constant.
        let back = denormalize_mel(&n, &norm);
        for &v in back.values.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_hits_zero_and_one() {
        let mut values = Array2::zeros((2, 3));
        values[(0, 0)] = 0.0f64;
        values[(1, 2)] = 7.0;
        values[(0, 1)] = 1.0;
        let m = MelSpectrogram {
            values,
            frame_rate: 62.5,
            normalized: false,
        };
        let (n, _) = normalize_mel(&m).unwrap();
        assert_eq!(n.values[(0, 0)], 0.0);
        assert_eq!(n.values[(1, 2)], 1.0);
        assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn normalize_round_trip_recovers_log_domain() {
        let values = Array2::from_shape_fn((8, 11), |(i, j)| ((i * 31 + j * 7) % 17) as f64 * 0.3);
        let m = MelSpectrogram {
            values: values.clone(),
            frame_rate: 62.5,
            normalized: false,
        };
        let (n, norm) = normalize_mel(&m).unwrap();
        let range = norm.max - norm.min;
        for (a, b) in n.values.iter().zip(values.iter()) {
            let recovered = a * range + norm.min;
            assert!((recovered - b.ln_1p()).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_twice_is_rejected() {
        let m = MelSpectrogram {
            values: Array2::from_elem((2, 2), 0.5f64),
            frame_rate: 62.5,
            normalized: true,
        };
        assert!(matches!(normalize_mel(&m), Err(DspError::AlreadyNormalized)));
    }

    #[test]
    fn mel_inverse_zero_grid() {
        let cfg = SpectralConfig::default();
        let m = MelSpectrogram {
            values: Array2::zeros((cfg.n_mels, 6)),
            frame_rate: cfg.frame_rate(),
            normalized: false,
        };
        let mag = mel_to_magnitude(&m, &cfg).unwrap();
        assert!(mag.iter().all(|&v: &f64| v == 0.0));
    }

    #[test]
    fn mel_inverse_reconstruction_error_is_small_on_tones() {
        let cfg = SpectralConfig::default();
        // Mixed tonal content.
        let mut w = sine(440.0, 16_000, 8_192, 0.3);
        let w2 = sine(1_750.0, 16_000, 8_192, 0.2);
        let w3 = sine(3_300.0, 16_000, 8_192, 0.15);
        for i in 0..w.samples.len() {
            w.samples[i] += w2.samples[i] + w3.samples[i];
        }
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        let mag = mel_to_magnitude(&mel, &cfg).unwrap();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        let rebuilt = fb.dot(&mag);
        let mut err = 0.0;
        let mut den = 0.0;
        for (a, b) in rebuilt.iter().zip(mel.values.iter()) {
            err += (a - b) * (a - b);
            den += b * b;
        }
        let rel = (err / den).sqrt();
        assert!(rel < 0.15, "relative reconstruction error {rel}");
    }

    #[test]
    fn mel_inverse_impulse_stays_in_band() {
        let cfg = SpectralConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        let row = 20;
        let mut values = Array2::zeros((cfg.n_mels, 1));
        values[(row, 0)] = 1.0f64;
        let m = MelSpectrogram {
            values,
            frame_rate: cfg.frame_rate(),
            normalized: false,
        };
        let mag = mel_to_magnitude(&m, &cfg).unwrap();
        // Energy must be confined to the filter row's support.
        let support: Vec<usize> = (0..cfg.n_bins()).filter(|&b| fb[(row, b)] > 0.0).collect();
        let total: f64 = mag.iter().sum();
        let inside: f64 = support.iter().map(|&b| mag[(b, 0)]).sum();
        assert!(inside / total > 0.99, "in-band fraction {}", inside / total);
    }
}
