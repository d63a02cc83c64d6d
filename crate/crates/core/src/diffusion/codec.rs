//! Fixed average-pool latent codec: the toy profile diffuses directly on
//! pooled normalized mel grids instead of a learned VAE latent.

use ndarray::Array3;

use super::DiffusionError;
use crate::dsp::MelSpectrogram;
use crate::num::Real;

/// Pools normalized mel grids by `pool` in both axes (encode) and expands
/// latents back by nearest-neighbor upsampling (decode).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentCodec {
    pub pool: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { pool: 4 }
    }
}

impl LatentCodec {
    /// `[1, n_mels/pool, floor(n_frames/pool)]` average pool. Trailing frames
    /// that do not fill a pool window are dropped.
    pub fn encode<T: Real>(&self, mel: &MelSpectrogram<T>) -> Result<Array3<T>, DiffusionError> {
        if !mel.normalized {
            return Err(DiffusionError::Codec(
                "codec expects a normalized mel grid".into(),
            ));
        }
        let p = self.pool;
        if mel.n_mels() % p != 0 {
            return Err(DiffusionError::Codec(format!(
                "n_mels {} not divisible by pool {}",
                mel.n_mels(),
                p
            )));
        }
        let fr = mel.n_frames() / p;
        if fr == 0 {
            return Err(DiffusionError::Codec(format!(
                "too few frames ({}) for pool {}",
                mel.n_frames(),
                p
            )));
        }
        let fm = mel.n_mels() / p;
        let norm = T::from_usize_c(p * p);
        let mut z = Array3::zeros((1, fm, fr));
        for i in 0..fm {
            for j in 0..fr {
                let mut acc = T::zero();
                for di in 0..p {
                    for dj in 0..p {
                        acc += mel.values[(i * p + di, j * p + dj)];
                    }
                }
                z[(0, i, j)] = acc / norm;
            }
        }
        Ok(z)
    }

    /// Nearest-neighbor upsample back to a normalized mel grid; values are
    /// clamped to the valid normalized range [0, 1].
    pub fn decode<T: Real>(&self, z: &Array3<T>, frame_rate: f64) -> MelSpectrogram<T> {
        let (c, fm, fr) = z.dim();
        assert_eq!(c, 1, "codec latents have one channel");
        let p = self.pool;
        let mut values = ndarray::Array2::zeros((fm * p, fr * p));
        for i in 0..fm * p {
            for j in 0..fr * p {
                let v = z[(0, i / p, j / p)];
                values[(i, j)] = v.max(T::zero()).min(T::one());
            }
        }
        MelSpectrogram {
            values,
            frame_rate,
            normalized: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn encode_pools_and_decode_expands() {
        let codec = LatentCodec { pool: 2 };
        let values = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 6 + j) as f64) / 24.0);
        let mel = MelSpectrogram {
            values: values.clone(),
            frame_rate: 62.5,
            normalized: true,
        };
        let z = codec.encode(&mel).unwrap();
        assert_eq!(z.dim(), (1, 2, 3));
        // Top-left pool window mean.
        let expect = (values[(0, 0)] + values[(0, 1)] + values[(1, 0)] + values[(1, 1)]) / 4.0;
        assert!((z[(0, 0, 0)] - expect).abs() < 1e-15);

        let back = codec.decode(&z, 62.5);
        assert_eq!(back.n_mels(), 4);
        assert_eq!(back.n_frames(), 6);
        assert!(back.normalized);
        assert_eq!(back.values[(0, 0)], back.values[(1, 1)]);
    }

    #[test]
    fn encode_truncates_trailing_frames() {
        let codec = LatentCodec { pool: 4 };
        let mel = MelSpectrogram {
            values: Array2::from_elem((8, 9), 0.5f64),
            frame_rate: 62.5,
            normalized: true,
        };
        let z = codec.encode(&mel).unwrap();
        assert_eq!(z.dim(), (1, 2, 2));
    }

    #[test]
    fn encode_requires_normalized() {
        let codec = LatentCodec::default();
        let mel = MelSpectrogram {
            values: Array2::from_elem((64, 8), 0.5f64),
            frame_rate: 62.5,
            normalized: false,
        };
        assert!(codec.encode(&mel).is_err());
    }

    #[test]
    fn decode_clamps_to_unit_range() {
        let codec = LatentCodec { pool: 2 };
        let mut z = Array3::zeros((1, 1, 1));
        z[(0, 0, 0)] = 1.7f64;
        let mel = codec.decode(&z, 62.5);
        assert_eq!(mel.values[(0, 0)], 1.0);
    }
}
