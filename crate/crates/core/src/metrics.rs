//! Synchronization and content metrics: timeline IoU, onset-count accuracy,
//! interval-count accuracy, and onset average precision at a fixed time
//! tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;
use crate::num::Real;
use crate::timeline::{extract_track, intervals_to_timeline, ActivityConfig, BinaryTimeline};
use crate::timeline::TimelineError;

/// Matching tolerance for onset average precision, in seconds.
pub const ONSET_TOLERANCE_S: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("timeline lengths differ: {a} vs {b} (resample first)")]
    LengthMismatch { a: usize, b: usize },
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// A list of onset times with optional confidences, sorted ascending by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetList {
    pub onsets: Vec<Onset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Onset {
    pub time_s: f64,
    pub confidence: f64,
}

impl OnsetList {
    /// Builds a list with uniform confidence 1.0; detections are then
    /// effectively ranked by time.
    pub fn from_times(times: &[f64]) -> Self {
        let mut times = times.to_vec();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self {
            onsets: times
                .into_iter()
                .map(|time_s| Onset {
                    time_s,
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }
}

/// Per-clip metric values, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub onset_acc: f64,
    pub time_acc: f64,
    pub onset_ap: f64,
    pub pred_events: usize,
    pub gt_events: usize,
}

/// Intersection-over-union of two equal-length binary timelines. Two
/// all-zero timelines agree perfectly and score 1.0.
pub fn iou(a: &BinaryTimeline, b: &BinaryTimeline) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(b.bits.iter()) {
        if x == 1 && y == 1 {
            inter += 1;
        }
        if x == 1 || y == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// 1.0 iff predicted and ground-truth onset counts match.
pub fn onset_acc(pred: &OnsetList, gt: &OnsetList) -> f64 {
    if pred.len() == gt.len() {
        1.0
    } else {
        0.0
    }
}

/// 1.0 iff predicted and ground-truth interval counts match.
pub fn time_acc(pred_intervals: usize, gt_intervals: usize) -> f64 {
    if pred_intervals == gt_intervals {
        1.0
    } else {
        0.0
    }
}

/// Average precision of predicted onsets greedily matched to ground truth
/// within `tol_s`. Detections are ranked by descending confidence, ties
/// broken by ascending time; each ground-truth onset is matched at most
/// once; the precision-recall curve is integrated by step interpolation.
pub fn onset_ap(pred: &OnsetList, gt: &OnsetList, tol_s: f64) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (false, true) => return 0.0,
        (true, false) => return 0.0,
        _ => {}
    }
    let mut ranked: Vec<Onset> = pred.onsets.clone();
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.time_s.partial_cmp(&b.time_s).unwrap())
    });

    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (rank, det) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.onsets.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let dist = (det.time_s - g.time_s).abs();
            if dist <= tol_s && best.map_or(true, |(_, d)| dist < d) {
                best = Some((gi, dist));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp += 1;
            let recall = tp as f64 / gt.len() as f64;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// Extracts a track from generated audio and scores it against a target
/// timeline. The prediction is rasterized at the target's frame grid.
pub fn evaluate_clip<T: Real>(
    pred_audio: &Waveform<T>,
    target: &BinaryTimeline,
    cfg: &ActivityConfig,
) -> Result<MetricReport, MetricError> {
    let track = extract_track(pred_audio, cfg)?;
    let pred_tl = intervals_to_timeline(&track, target.frame_rate, target.len())?;
    let gt_intervals = target.to_intervals();

    let pred_onsets = OnsetList::from_times(&track.onsets());
    let gt_onsets =
        OnsetList::from_times(&gt_intervals.iter().map(|e| e.start_s).collect::<Vec<_>>());

    Ok(MetricReport {
        iou: iou(&pred_tl, target)?,
        onset_acc: onset_acc(&pred_onsets, &gt_onsets),
        time_acc: time_acc(track.events.len(), gt_intervals.len()),
        onset_ap: onset_ap(&pred_onsets, &gt_onsets, ONSET_TOLERANCE_S),
        pred_events: track.events.len(),
        gt_events: gt_intervals.len(),
    })
}

/// Mean of each metric over clips.
pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(MetricReport {
        iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
        onset_acc: reports.iter().map(|r| r.onset_acc).sum::<f64>() / n,
        time_acc: reports.iter().map(|r| r.time_acc).sum::<f64>() / n,
        onset_ap: reports.iter().map(|r| r.onset_ap).sum::<f64>() / n,
        pred_events: reports.iter().map(|r| r.pred_events).sum(),
        gt_events: reports.iter().map(|r| r.gt_events).sum(),
    })
}
