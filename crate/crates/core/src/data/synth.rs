//! Synthetic benchmark generation: non-overlapping tone/noise/click events
//! rendered over silence, captions faithful to event count and kind, and
//! exact ground-truth timelines.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::manifest::{serialize_manifest, ManifestEntry};
use crate::dsp::{write_wav, DspError, WavEncoding, Waveform};
use crate::num::Real;
use crate::timeline::{intervals_to_timeline, BinaryTimeline, EventInterval, TimelineError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Rendered event kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoundKind {
    ToneBurst,
    NoiseBurst,
    ClickTrain,
}

impl SoundKind {
    fn phrase(&self, plural: bool) -> &'static str {
        match (self, plural) {
            (SoundKind::ToneBurst, false) => "tone burst",
            (SoundKind::ToneBurst, true) => "tone bursts",
            (SoundKind::NoiseBurst, false) => "noise burst",
            (SoundKind::NoiseBurst, true) => "noise bursts",
            (SoundKind::ClickTrain, false) => "click train",
            (SoundKind::ClickTrain, true) => "click trains",
        }
    }

    fn category(&self) -> &'static str {
        match self {
            SoundKind::ToneBurst => "Instruments",
            SoundKind::NoiseBurst => "Sound Design Effects",
            SoundKind::ClickTrain => "Foley",
        }
    }
}

const COUNT_WORDS: [&str; 8] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight",
];

/// Generation parameters for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub clip_duration_s: f64,
    pub sample_rate: u32,
    pub events_min: usize,
    pub events_max: usize,
    pub event_duration_s: (f64, f64),
    /// Minimum silence between events (and before the first event).
    pub min_gap_s: f64,
    pub kinds: Vec<SoundKind>,
    pub tone_freq_hz: (f64, f64),
    /// Peak amplitude of rendered events, dB re full scale.
    pub amplitude_dbfs: f64,
    pub timeline_fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 100,
            clip_duration_s: 2.048,
            sample_rate: 16_000,
            events_min: 1,
            events_max: 2,
            event_duration_s: (0.4, 0.9),
            min_gap_s: 0.25,
            kinds: vec![
                SoundKind::ToneBurst,
                SoundKind::NoiseBurst,
                SoundKind::ClickTrain,
            ],
            tone_freq_hz: (220.0, 3_000.0),
            amplitude_dbfs: -6.0,
            timeline_fps: 62.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Rejects specs whose worst-case event draw cannot fit in the clip.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.clips == 0 {
            return Err(SynthError::Invalid("clips must be >= 1".into()));
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return Err(SynthError::Invalid(
                "need 1 <= events_min <= events_max".into(),
            ));
        }
        if self.events_max > COUNT_WORDS.len() {
            return Err(SynthError::Invalid(format!(
                "events_max {} exceeds the caption vocabulary ({})",
                self.events_max,
                COUNT_WORDS.len()
            )));
        }
        if self.kinds.is_empty() {
            return Err(SynthError::Invalid("no sound kinds".into()));
        }
        let (lo, hi) = self.event_duration_s;
        if !(0.0 < lo && lo <= hi) {
            return Err(SynthError::Invalid("bad event duration range".into()));
        }
        let worst = self.events_max as f64 * hi + (self.events_max + 1) as f64 * self.min_gap_s;
        if worst > self.clip_duration_s {
            return Err(SynthError::Infeasible(format!(
                "{} events of up to {hi}s with {}s gaps cannot fit {}s",
                self.events_max, self.min_gap_s, self.clip_duration_s
            )));
        }
        Ok(())
    }

    /// The caption template vocabulary induced by this spec.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = COUNT_WORDS.iter().map(|w| w.to_string()).collect();
        for w in ["tone", "noise", "click", "burst", "bursts", "train", "trains"] {
            words.push(w.to_string());
        }
        words
    }
}

/// One generated clip, before any files are written.
#[derive(Debug, Clone)]
pub struct SynthClip<T> {
    pub id: String,
    pub waveform: Waveform<T>,
    pub caption: String,
    pub kind: SoundKind,
    pub events: Vec<EventInterval>,
    pub timeline: BinaryTimeline,
}

/// Places `count` events with pairwise gaps >= min_gap_s by stick-breaking
/// the free time into count + 1 leading gaps.
fn place_events(
    rng: &mut ChaCha8Rng,
    count: usize,
    durations: &[f64],
    clip_s: f64,
    min_gap_s: f64,
) -> Vec<EventInterval> {
    let used: f64 = durations.iter().sum::<f64>() + (count + 1) as f64 * min_gap_s;
    let free = (clip_s - used).max(0.0);
    let cuts: Vec<f64> = (0..=count).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = cuts.iter().sum();
    let mut cursor = 0.0;
    let mut events = Vec::with_capacity(count);
    for (i, &d) in durations.iter().enumerate() {
        cursor += min_gap_s + free * cuts[i] / total;
        events.push(EventInterval {
            start_s: cursor,
            end_s: cursor + d,
        });
        cursor += d;
    }
    events
}

fn render_event<T: Real>(
    samples: &mut [T],
    event: &EventInterval,
    kind: SoundKind,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) {
    let sr = spec.sample_rate as f64;
    let amp = 10f64.powf(spec.amplitude_dbfs / 20.0);
    let i0 = (event.start_s * sr).round() as usize;
    let i1 = ((event.end_s * sr).round() as usize).min(samples.len());
    if i0 >= i1 {
        return;
    }
    let n = i1 - i0;
    let ramp = ((0.005 * sr) as usize).max(1).min(n / 2);
    let fade = |k: usize| -> f64 {
        let up = (k as f64 + 1.0) / ramp as f64;
        let down = ((n - k) as f64) / ramp as f64;
        up.min(down).min(1.0)
    };
    match kind {
        SoundKind::ToneBurst => {
            let freq = rng.gen_range(spec.tone_freq_hz.0..spec.tone_freq_hz.1);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for k in 0..n {
                let t = (i0 + k) as f64 / sr;
                let v = amp * fade(k) * (std::f64::consts::TAU * freq * t + phase).sin();
                samples[i0 + k] = T::from_f64_c(v);
            }
        }
        SoundKind::NoiseBurst => {
            for k in 0..n {
                let v = amp * fade(k) * rng.gen_range(-1.0..1.0);
                samples[i0 + k] = T::from_f64_c(v);
            }
        }
        SoundKind::ClickTrain => {
            // 100 Hz click rate, 4 ms clicks: inter-click gaps stay under the
            // merge threshold so a train reads as one event.
            let period = (0.010 * sr) as usize;
            let width = (0.004 * sr) as usize;
            for k in 0..n {
                let in_click = k % period.max(1) < width;
                let v = if in_click {
                    amp * fade(k) * rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                };
                samples[i0 + k] = T::from_f64_c(v);
            }
        }
    }
}

/// Generates the corpus in memory. Deterministic for a fixed spec.
pub fn synth_clips<T: Real>(spec: &SyntheticSpec) -> Result<Vec<SynthClip<T>>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_samples = (spec.clip_duration_s * spec.sample_rate as f64).round() as usize;
    let n_frames = (spec.clip_duration_s * spec.timeline_fps).ceil() as usize;

    let mut clips = Vec::with_capacity(spec.clips);
    for idx in 0..spec.clips {
        let count = rng.gen_range(spec.events_min..=spec.events_max);
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let durations: Vec<f64> = (0..count)
            .map(|_| rng.gen_range(spec.event_duration_s.0..=spec.event_duration_s.1))
            .collect();
        let events = place_events(
            &mut rng,
            count,
            &durations,
            spec.clip_duration_s,
            spec.min_gap_s,
        );
        let mut samples = vec![T::zero(); n_samples];
        for event in &events {
            render_event(&mut samples, event, kind, spec, &mut rng);
        }
        let caption = format!("{} {}", COUNT_WORDS[count - 1], kind.phrase(count > 1));
        let track = crate::timeline::EventTrack {
            duration_s: spec.clip_duration_s,
            events: events.clone(),
        };
        let timeline = intervals_to_timeline(&track, spec.timeline_fps, n_frames)?;
        clips.push(SynthClip {
            id: format!("clip-{idx:05}"),
            waveform: Waveform::new(samples, spec.sample_rate),
            caption,
            kind,
            events,
            timeline,
        });
    }
    Ok(clips)
}

/// Files written by [`synth_generate`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub audio_dir: PathBuf,
    pub timeline_dir: PathBuf,
    pub clip_ids: Vec<String>,
}

/// Renders the corpus to `out_dir`: audio/*.wav (PCM16), timelines/*.json,
/// and manifest.jsonl. Byte-identical for a fixed spec.
pub fn synth_generate<T: Real>(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<GeneratedDataset, SynthError> {
    let out_dir = out_dir.as_ref();
    let audio_dir = out_dir.join("audio");
    let timeline_dir = out_dir.join("timelines");
    std::fs::create_dir_all(&audio_dir)?;
    std::fs::create_dir_all(&timeline_dir)?;

    let clips = synth_clips::<T>(spec)?;
    let mut entries = Vec::with_capacity(clips.len());
    let mut ids = Vec::with_capacity(clips.len());
    for clip in &clips {
        let wav_rel = format!("audio/{}.wav", clip.id);
        write_wav(
            audio_dir.join(format!("{}.wav", clip.id)),
            &clip.waveform,
            WavEncoding::Pcm16,
        )?;
        std::fs::write(
            timeline_dir.join(format!("{}.json", clip.id)),
            serde_json::to_string_pretty(&clip.timeline).expect("timeline serializes"),
        )?;
        entries.push(ManifestEntry {
            id: clip.id.clone(),
            audio_path: wav_rel,
            caption: clip.caption.clone(),
            category: clip.kind.category().to_string(),
            events: clip.events.clone(),
            duration_s: spec.clip_duration_s,
        });
        ids.push(clip.id.clone());
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, serialize_manifest(&entries))?;
    Ok(GeneratedDataset {
        manifest_path,
        audio_dir,
        timeline_dir,
        clip_ids: ids,
    })
}
