//! Short-time Fourier transform with centered reflection padding.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DspError, SpectralConfig, Waveform};
use crate::num::Real;

/// Periodic Hann window of length `n`.
pub fn hann_window<T: Real>(n: usize) -> Vec<T> {
    let two_pi = T::PI() + T::PI();
    (0..n)
        .map(|i| {
            let half = T::from_f64_c(0.5);
            half - half * (two_pi * T::from_usize_c(i) / T::from_usize_c(n)).cos()
        })
        .collect()
}

/// Mirror index into [0, len) without repeating the edge sample.
fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Complex STFT, `n_fft/2 + 1` bins by `1 + len/hop` frames.
pub fn stft_complex<T: Real>(
    w: &Waveform<T>,
    cfg: &SpectralConfig,
) -> Result<Array2<Complex<T>>, DspError> {
    cfg.validate()?;
    let len = w.samples.len();
    if len < cfg.n_fft {
        return Err(DspError::TooShort {
            len,
            need: cfg.n_fft,
        });
    }
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let n_frames = 1 + len / cfg.hop;
    let n_bins = cfg.n_bins();
    let window = hann_window::<T>(n_fft);

    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::from_elem((n_bins, n_frames), Complex::new(T::zero(), T::zero()));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];

    for frame in 0..n_frames {
        let start = frame as isize * cfg.hop as isize - pad as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = w.samples[reflect(start + i as isize, len)];
            *slot = Complex::new(s * window[i], T::zero());
        }
        fft.process(&mut buf);
        for bin in 0..n_bins {
            out[(bin, frame)] = buf[bin];
        }
    }
    Ok(out)
}

/// Magnitude STFT (Hann window, centered with reflection padding).
pub fn stft_magnitude<T: Real>(
    w: &Waveform<T>,
    cfg: &SpectralConfig,
) -> Result<Array2<T>, DspError> {
    Ok(stft_complex(w, cfg)?.mapv(|c| c.norm()))
}

/// Inverse STFT by windowed overlap-add with squared-window normalization.
/// Output length is `(n_frames - 1) * hop`.
pub fn istft<T: Real>(spec: &Array2<Complex<T>>, cfg: &SpectralConfig) -> Vec<T> {
    let n_fft = cfg.n_fft;
    let n_bins = cfg.n_bins();
    assert_eq!(spec.nrows(), n_bins, "bin count mismatch");
    let n_frames = spec.ncols();
    let window = hann_window::<T>(n_fft);

    let mut planner = FftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(n_fft);

    let ola_len = (n_frames - 1) * cfg.hop + n_fft;
    let mut acc = vec![T::zero(); ola_len];
    let mut norm = vec![T::zero(); ola_len];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
    let scale = T::one() / T::from_usize_c(n_fft);

    for frame in 0..n_frames {
        // Rebuild the full spectrum from the half-spectrum by conjugate symmetry.
        for bin in 0..n_bins {
            buf[bin] = spec[(bin, frame)];
        }
        for bin in n_bins..n_fft {
            buf[bin] = spec[(n_fft - bin, frame)].conj();
        }
        ifft.process(&mut buf);
        let offset = frame * cfg.hop;
        for i in 0..n_fft {
            let v = buf[i].re * scale;
            acc[offset + i] += v * window[i];
            norm[offset + i] += window[i] * window[i];
        }
    }

    let pad = n_fft / 2;
    let out_len = (n_frames - 1) * cfg.hop;
    let floor = T::from_f64_c(1e-10);
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            acc[j] / norm[j].max(floor)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> Waveform<f64> {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn frame_count_matches_centered_convention() {
        let cfg = SpectralConfig::default();
        let w = sine(440.0, 16_000, 16_000, 0.5);
        let mag = stft_magnitude(&w, &cfg).unwrap();
        assert_eq!(mag.ncols(), 1 + 16_000 / cfg.hop);
        assert_eq!(mag.nrows(), cfg.n_fft / 2 + 1);
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = SpectralConfig::default();
        // Exactly bin 32: 32 * 16000 / 1024 = 500 Hz.
        let w = sine(500.0, 16_000, 8_192, 0.5);
        let mag = stft_magnitude(&w, &cfg).unwrap();
        let mid = mag.column(mag.ncols() / 2);
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 32);
    }

    #[test]
    fn istft_inverts_stft_in_the_interior() {
        let cfg = SpectralConfig {
            n_fft: 256,
            hop: 64,
            ..SpectralConfig::default()
        };
        let w = sine(700.0, 16_000, 4_096, 0.4);
        let spec = stft_complex(&w, &cfg).unwrap();
        let back = istft(&spec, &cfg);
        assert!(back.len() >= 4_096);
        // Skip one window at each end where reflection padding distorts.
        for i in cfg.n_fft..(4_096 - cfg.n_fft) {
            assert!(
                (back[i] - w.samples[i]).abs() < 1e-8,
                "sample {i}: {} vs {}",
                back[i],
                w.samples[i]
            );
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let cfg = SpectralConfig::default();
        let w = Waveform::new(vec![0.0f64; 100], 16_000);
        assert!(matches!(
            stft_magnitude(&w, &cfg),
            Err(DspError::TooShort { .. })
        ));
    }
}
