//! RIFF WAV read/write via `hound`, restricted to PCM16 and IEEE float32.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{DspError, Waveform};
use crate::num::Real;

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a PCM16 or float32 WAV file. Stereo is mixed down to mono by
/// averaging; integer samples are scaled by 1/32768.
pub fn load_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>, DspError> {
    let reader = WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(DspError::UnsupportedCodec(format!(
            "{} channels (mono or stereo only)",
            spec.channels
        )));
    }
    let channels = spec.channels as usize;
    let mono: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => {
            let samples: Result<Vec<i16>, _> = reader.into_samples().collect();
            let samples = samples.map_err(map_hound)?;
            mixdown(&samples, channels, |s| s as f64 / 32768.0)
        }
        (SampleFormat::Float, 32) => {
            let samples: Result<Vec<f32>, _> = reader.into_samples().collect();
            let samples = samples.map_err(map_hound)?;
            mixdown(&samples, channels, |s| s as f64)
        }
        (fmt, bits) => {
            return Err(DspError::UnsupportedCodec(format!(
                "{bits}-bit {fmt:?} (PCM16 or float32 only)"
            )))
        }
    };
    Ok(Waveform::new(
        mono.into_iter().map(T::from_f64_c).collect(),
        spec.sample_rate,
    ))
}

fn mixdown<S: Copy>(samples: &[S], channels: usize, to_f64: impl Fn(S) -> f64) -> Vec<f64> {
    samples
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| to_f64(s)).sum::<f64>() / channels as f64)
        .collect()
}

/// Writes a mono WAV file.
pub fn write_wav<T: Real>(
    path: impl AsRef<Path>,
    w: &Waveform<T>,
    encoding: WavEncoding,
) -> Result<(), DspError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &w.samples {
        let v = s.to_f64_c();
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(map_hound)?;
            }
            WavEncoding::Float32 => {
                writer.write_sample(v as f32).map_err(map_hound)?;
            }
        }
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

fn map_hound(e: hound::Error) -> DspError {
    match e {
        hound::Error::IoError(io) => DspError::Io(io),
        hound::Error::FormatError(msg) => DspError::MalformedWav(msg.to_string()),
        hound::Error::Unsupported => DspError::UnsupportedCodec("unsupported wav layout".into()),
        other => DspError::MalformedWav(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sonotime-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn silence_round_trips() {
        let w = Waveform::<f64>::new(vec![0.0; 16_000], 16_000);
        let p = tmp("silence.wav");
        write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        let back: Waveform<f64> = load_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), 16_000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        // Raw i16 square wave at +/-32767 must come back as +/-(32767/32768).
        let p = tmp("square.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut writer = WavWriter::create(&p, spec).unwrap();
        for i in 0..64 {
            let v: i16 = if i % 2 == 0 { 32767 } else { -32767 };
            writer.write_sample(v).unwrap();
        }
        writer.finalize().unwrap();

        let w: Waveform<f64> = load_wav(&p).unwrap();
        let expect = 32767.0 / 32768.0;
        for (i, &s) in w.samples.iter().enumerate() {
            let want = if i % 2 == 0 { expect } else { -expect };
            assert!((s - want).abs() < 1e-6, "sample {i}: {s} vs {want}");
        }
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let p = tmp("stereo.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut writer = WavWriter::create(&p, spec).unwrap();
        for _ in 0..100 {
            writer.write_sample(0.5f32).unwrap();
            writer.write_sample(-0.5f32).unwrap();
        }
        writer.finalize().unwrap();

        let w: Waveform<f64> = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_unsupported_bit_depth() {
        let p = tmp("deep.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut writer = WavWriter::create(&p, spec).unwrap();
        writer.write_sample(0i32).unwrap();
        writer.finalize().unwrap();
        match load_wav::<f64>(&p) {
            Err(DspError::UnsupportedCodec(_)) => {}
            other => panic!("expected UnsupportedCodec, got {other:?}"),
        }
    }

    #[test]
    fn rejects_garbage_header() {
        let p = tmp("garbage.wav");
        std::fs::write(&p, b"definitely not a riff file").unwrap();
        match load_wav::<f64>(&p) {
            Err(DspError::MalformedWav(_)) | Err(DspError::Io(_)) => {}
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match load_wav::<f64>("/nonexistent/nowhere.wav") {
            Err(DspError::Io(_)) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }
}
