//! Sound-event timelines: per-frame activity detection, gap merging into
//! events, binary presence vectors, and frame-rate resampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;
use crate::num::Real;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("empty input")]
    Empty,
    #[error("invalid activity config: {0}")]
    InvalidConfig(String),
    #[error("interval [{start}, {end}] exceeds timeline span {span}")]
    IntervalOutOfRange { start: f64, end: f64, span: f64 },
    #[error("timeline must have at least one frame")]
    NoFrames,
}

/// A single sound event in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl EventInterval {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Ordered, non-overlapping sound events over a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrack {
    pub duration_s: f64,
    pub events: Vec<EventInterval>,
}

impl EventTrack {
    /// Onset times (event starts), sorted ascending.
    pub fn onsets(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.start_s).collect()
    }

    pub fn total_sound_duration_s(&self) -> f64 {
        self.events.iter().map(|e| e.duration_s()).sum()
    }
}

/// Per-frame 0/1 sound-presence vector at a fixed frame rate.
///
/// Serializes as `{"frame_rate": f, "bits": "0110..."}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTimeline {
    pub bits: Vec<u8>,
    pub frame_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct TimelineWire {
    frame_rate: f64,
    bits: String,
}

impl Serialize for BinaryTimeline {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TimelineWire {
            frame_rate: self.frame_rate,
            bits: self
                .bits
                .iter()
                .map(|&b| if b == 1 { '1' } else { '0' })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BinaryTimeline {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = TimelineWire::deserialize(deserializer)?;
        if wire.bits.is_empty() {
            return Err(serde::de::Error::custom("timeline bitstring is empty"));
        }
        if wire.frame_rate <= 0.0 {
            return Err(serde::de::Error::custom("frame_rate must be positive"));
        }
        let bits = wire
            .bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(serde::de::Error::custom(format!(
                    "invalid bit character {other:?}"
                ))),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Ok(BinaryTimeline::new(bits, wire.frame_rate))
    }
}

impl BinaryTimeline {
    pub fn new(bits: Vec<u8>, frame_rate: f64) -> Self {
        assert!(!bits.is_empty(), "timeline needs at least one frame");
        assert!(frame_rate > 0.0, "frame rate must be positive");
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Self { bits, frame_rate }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.bits.len() as f64 / self.frame_rate
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Run-length decodes the 1-runs back into intervals.
    pub fn to_intervals(&self) -> Vec<EventInterval> {
        let mut events = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, &b) in self.bits.iter().enumerate() {
            match (b, run_start) {
                (1, None) => run_start = Some(i),
                (0, Some(s)) => {
                    events.push(EventInterval {
                        start_s: s as f64 / self.frame_rate,
                        end_s: i as f64 / self.frame_rate,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            events.push(EventInterval {
                start_s: s as f64 / self.frame_rate,
                end_s: self.bits.len() as f64 / self.frame_rate,
            });
        }
        events
    }
}

/// Frame-energy activity detection parameters. `threshold_db` is dB relative
/// to full scale; frames whose RMS exceeds it are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivityConfig {
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub threshold_db: f64,
    pub merge_gap_s: f64,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        Self {
            frame_len_s: 0.025,
            hop_s: 0.010,
            threshold_db: -35.0,
            merge_gap_s: 0.02,
        }
    }
}

impl ActivityConfig {
    pub fn validate(&self) -> Result<(), TimelineError> {
        if !(self.hop_s > 0.0 && self.frame_len_s >= self.hop_s) {
            return Err(TimelineError::InvalidConfig(format!(
                "need frame_len_s >= hop_s > 0 (frame_len_s={}, hop_s={})",
                self.frame_len_s, self.hop_s
            )));
        }
        if self.merge_gap_s < 0.0 {
            return Err(TimelineError::InvalidConfig(
                "merge_gap_s must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Frame k is active iff the RMS energy of samples in
/// [k*hop_s, k*hop_s + frame_len_s) exceeds `threshold_db`.
pub fn detect_activity<T: Real>(
    w: &Waveform<T>,
    cfg: &ActivityConfig,
) -> Result<Vec<bool>, TimelineError> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(TimelineError::Empty);
    }
    let sr = w.sample_rate as f64;
    let frame_len = ((cfg.frame_len_s * sr).round() as usize).max(1);
    let hop = ((cfg.hop_s * sr).round() as usize).max(1);
    let n = if w.len() >= frame_len {
        (w.len() - frame_len) / hop + 1
    } else {
        1
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let start = k * hop;
        let end = (start + frame_len).min(w.len());
        let mut acc = 0.0f64;
        for &s in &w.samples[start..end] {
            let v = s.to_f64_c();
            acc += v * v;
        }
        let rms = (acc / (end - start) as f64).sqrt();
        let db = if rms > 0.0 {
            20.0 * rms.log10()
        } else {
            f64::NEG_INFINITY
        };
        out.push(db > cfg.threshold_db);
    }
    Ok(out)
}

/// Maximal runs of active frames become intervals; runs separated by a gap
/// of at most `merge_gap_s` are fused. Interval ends are clamped to the
/// span covered by the frames.
pub fn merge_events(frames: &[bool], cfg: &ActivityConfig) -> Result<EventTrack, TimelineError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(TimelineError::Empty);
    }
    let duration_s = (frames.len() - 1) as f64 * cfg.hop_s + cfg.frame_len_s;

    let mut raw: Vec<EventInterval> = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &active) in frames.iter().enumerate() {
        match (active, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                raw.push(frame_run_to_interval(s, i - 1, cfg, duration_s));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        raw.push(frame_run_to_interval(s, frames.len() - 1, cfg, duration_s));
    }

    Ok(EventTrack {
        duration_s,
        events: merge_intervals(raw, cfg.merge_gap_s),
    })
}

fn frame_run_to_interval(
    first: usize,
    last: usize,
    cfg: &ActivityConfig,
    duration_s: f64,
) -> EventInterval {
    EventInterval {
        start_s: first as f64 * cfg.hop_s,
        end_s: (last as f64 * cfg.hop_s + cfg.frame_len_s).min(duration_s),
    }
}

/// Fuses sorted intervals whose gap is at most `merge_gap_s`.
pub fn merge_intervals(intervals: Vec<EventInterval>, merge_gap_s: f64) -> Vec<EventInterval> {
    let mut out: Vec<EventInterval> = Vec::with_capacity(intervals.len());
    for iv in intervals {
        match out.last_mut() {
            Some(prev) if iv.start_s - prev.end_s <= merge_gap_s => {
                prev.end_s = prev.end_s.max(iv.end_s);
            }
            _ => out.push(iv),
        }
    }
    out
}

/// Bit t is 1 iff the frame center time lies in [start, end) of some event.
pub fn intervals_to_timeline(
    track: &EventTrack,
    frame_rate: f64,
    n_frames: usize,
) -> Result<BinaryTimeline, TimelineError> {
    if n_frames == 0 {
        return Err(TimelineError::NoFrames);
    }
    let span = n_frames as f64 / frame_rate;
    for e in &track.events {
        if e.end_s > span + 1e-9 {
            return Err(TimelineError::IntervalOutOfRange {
                start: e.start_s,
                end: e.end_s,
                span,
            });
        }
    }
    let mut bits = vec![0u8; n_frames];
    for e in &track.events {
        for (t, bit) in bits.iter_mut().enumerate() {
            let center = (t as f64 + 0.5) / frame_rate;
            if center >= e.start_s && center < e.end_s {
                *bit = 1;
            }
        }
    }
    Ok(BinaryTimeline::new(bits, frame_rate))
}

/// OR-pooling resample: a target bit is 1 iff any overlapping source frame
/// is 1. The total duration is preserved, so the output frame rate is
/// `target_frames / duration`.
pub fn resample_timeline(
    t: &BinaryTimeline,
    target_frames: usize,
) -> Result<BinaryTimeline, TimelineError> {
    if target_frames == 0 {
        return Err(TimelineError::NoFrames);
    }
    let n_src = t.bits.len();
    let duration = t.duration_s();
    let mut bits = vec![0u8; target_frames];
    for (tgt, bit) in bits.iter_mut().enumerate() {
        // Source frame s overlaps target frame tgt iff
        // s/n_src < (tgt+1)/target_frames and tgt/target_frames < (s+1)/n_src,
        // evaluated exactly in integers.
        for (s, &src_bit) in t.bits.iter().enumerate() {
            if src_bit == 1
                && s * target_frames < (tgt + 1) * n_src
                && tgt * n_src < (s + 1) * target_frames
            {
                *bit = 1;
                break;
            }
        }
    }
    Ok(BinaryTimeline::new(
        bits,
        target_frames as f64 / duration,
    ))
}

/// Composition of [`detect_activity`] and [`merge_events`].
pub fn extract_track<T: Real>(
    w: &Waveform<T>,
    cfg: &ActivityConfig,
) -> Result<EventTrack, TimelineError> {
    let frames = detect_activity(w, cfg)?;
    merge_events(&frames, cfg)
}
