//! Sound-event timestamp detector: per-frame visual features in, per-frame
//! sound-presence probabilities out, trained with duration-weighted binary
//! cross-entropy against timelines extracted from paired audio.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;
use crate::nn::{
    silu, silu_backward, sigmoid, Adam, AdamConfig, Conv1d, Conv1dCache, Param, ParamModel,
};
use crate::num::Real;
use crate::timeline::{
    extract_track, intervals_to_timeline, resample_timeline, ActivityConfig, BinaryTimeline,
    TimelineError,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("feature width {got} does not match detector input width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("prediction/target length mismatch: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// Per-frame visual features, `T` rows by `D` columns, at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence<T> {
    pub features: Array2<T>,
    pub fps: f64,
}

impl<T: Real> FrameFeatureSequence<T> {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Target bits with per-frame loss weights. Frames inside event k all share
/// the weight (dur_k / total sound duration) * K; silent frames weigh 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTarget {
    pub bits: Vec<u8>,
    pub weights: Vec<f64>,
}

/// Extracts the ground-truth timeline from paired audio, resamples it to the
/// video frame count, and attaches duration-based weights.
pub fn build_target<T: Real>(
    audio: &Waveform<T>,
    cfg: &ActivityConfig,
    video_frame_count: usize,
) -> Result<WeightedTarget, DetectorError> {
    let track = extract_track(audio, cfg)?;
    let act_rate = 1.0 / cfg.hop_s;
    let n_act = ((track.duration_s * act_rate).ceil() as usize).max(1);
    let tl = intervals_to_timeline(&track, act_rate, n_act)?;
    let v_ct = resample_timeline(&tl, video_frame_count)?;

    let mut weights = vec![1.0f64; v_ct.len()];
    let runs = v_ct.to_intervals();
    let total_frames: usize = v_ct.count_ones();
    let k = runs.len();
    if k > 0 && total_frames > 0 {
        // Run lengths in frames, recovered from the run intervals.
        let mut frame = 0usize;
        while frame < v_ct.len() {
            if v_ct.bits[frame] == 1 {
                let start = frame;
                while frame < v_ct.len() && v_ct.bits[frame] == 1 {
                    frame += 1;
                }
                let run_len = frame - start;
                let w = (run_len as f64 / total_frames as f64) * k as f64;
                for slot in weights.iter_mut().take(frame).skip(start) {
                    *slot = w;
                }
            } else {
                frame += 1;
            }
        }
    }
    Ok(WeightedTarget {
        bits: v_ct.bits,
        weights,
    })
}

/// Detector architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_dim: 8,
            hidden: 16,
            layers: 2,
            kernel: 5,
        }
    }
}

/// Temporal convolution stack with a per-frame linear classifier head.
/// Same-padding keeps the output length equal to the input length.
#[derive(Debug, Clone)]
pub struct DetectorParams<T> {
    pub cfg: DetectorConfig,
    pub convs: Vec<Conv1d<T>>,
    pub head: Conv1d<T>,
}

#[derive(Debug, Clone)]
pub struct DetectorCache<T> {
    conv_caches: Vec<Conv1dCache<T>>,
    pre_acts: Vec<Array2<T>>,
    head_cache: Conv1dCache<T>,
    probs: Vec<T>,
}

impl<T: Real> DetectorParams<T> {
    pub fn init(cfg: DetectorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let c_in = if i == 0 { cfg.in_dim } else { cfg.hidden };
            convs.push(Conv1d::new(c_in, cfg.hidden, cfg.kernel, rng));
        }
        let head = Conv1d::new(cfg.hidden, 1, 1, rng);
        Self { cfg, convs, head }
    }

    /// All-zero parameters: every output probability is sigmoid(0) = 0.5.
    pub fn zeroed(cfg: DetectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(cfg, &mut rng);
        model.visit_params(&mut |_, p| p.value.fill(T::zero()));
        model
    }

    /// Per-frame probabilities in (0, 1), one per input frame.
    pub fn forward(
        &self,
        x: &FrameFeatureSequence<T>,
    ) -> Result<(Vec<T>, DetectorCache<T>), DetectorError> {
        if x.dim() != self.cfg.in_dim {
            return Err(DetectorError::WidthMismatch {
                got: x.dim(),
                want: self.cfg.in_dim,
            });
        }
        let mut h = x.features.t().to_owned(); // [D, T]
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(&h);
            h = silu(&pre);
            conv_caches.push(cache);
            pre_acts.push(pre);
        }
        let (logits, head_cache) = self.head.forward(&h);
        let probs: Vec<T> = logits.row(0).iter().map(|&v| sigmoid(v)).collect();
        Ok((
            probs.clone(),
            DetectorCache {
                conv_caches,
                pre_acts,
                head_cache,
                probs,
            },
        ))
    }

    /// Backward from gradients wrt the output probabilities.
    pub fn backward(&mut self, cache: &DetectorCache<T>, g_probs: &[T]) {
        let t = cache.probs.len();
        let mut g_logits = Array2::zeros((1, t));
        for i in 0..t {
            let p = cache.probs[i];
            g_logits[(0, i)] = g_probs[i] * p * (T::one() - p);
        }
        let mut g = self.head.backward(&cache.head_cache, &g_logits);
        for li in (0..self.convs.len()).rev() {
            let g_pre = silu_backward(&cache.pre_acts[li], &g);
            g = self.convs[li].backward(&cache.conv_caches[li], &g_pre);
        }
    }
}

impl<T: Real> ParamModel<T> for DetectorParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("det.conv{i}"), f);
        }
        self.head.visit("det.head", f);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_ref(&format!("det.conv{i}"), f);
        }
        self.head.visit_ref("det.head", f);
    }

    fn model_name(&self) -> &'static str {
        "detector"
    }
}

const BCE_CLAMP: f64 = 1e-7;

/// Duration-weighted binary cross-entropy, normalized by the weight sum, and
/// its gradient wrt the probabilities. Probabilities are clamped to
/// [1e-7, 1 - 1e-7] inside the logs.
pub fn weighted_bce<T: Real>(
    pred: &[T],
    target: &WeightedTarget,
) -> Result<(T, Vec<T>), DetectorError> {
    if pred.len() != target.bits.len() || pred.len() != target.weights.len() {
        return Err(DetectorError::LengthMismatch {
            pred: pred.len(),
            target: target.bits.len(),
        });
    }
    let lo = T::from_f64_c(BCE_CLAMP);
    let hi = T::one() - lo;
    let w_sum: f64 = target.weights.iter().sum();
    let w_sum = T::from_f64_c(w_sum);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for i in 0..pred.len() {
        let w = T::from_f64_c(target.weights[i]);
        let y = if target.bits[i] == 1 { T::one() } else { T::zero() };
        let raw = pred[i];
        let p = raw.max(lo).min(hi);
        loss += w * (-(y * p.ln()) - (T::one() - y) * (T::one() - p).ln());
        // Zero gradient where the clamp is active.
        if raw > lo && raw < hi {
            grad[i] = w * (p - y) / (p * (T::one() - p)) / w_sum;
        }
    }
    Ok((loss / w_sum, grad))
}

/// Bit = 1 iff probability >= threshold.
pub fn threshold_predictions<T: Real>(probs: &[T], fps: f64, threshold: f64) -> BinaryTimeline {
    let thr = T::from_f64_c(threshold);
    BinaryTimeline::new(
        probs
            .iter()
            .map(|&p| if p >= thr { 1u8 } else { 0u8 })
            .collect(),
        fps,
    )
}

/// Per-frame average precision: frames ranked by descending probability,
/// step-interpolated PR integration.
pub fn frame_ap<T: Real>(probs: &[T], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return if probs.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            tp += 1;
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// Detector training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 24,
            adam: AdamConfig {
                lr: 1.0e-5,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains the detector with duration-weighted BCE. Items are visited in a
/// seeded shuffled order per epoch; gradients reduce in item order.
pub fn train_detector<T: Real>(
    items: &[(FrameFeatureSequence<T>, WeightedTarget)],
    model: &mut DetectorParams<T>,
    cfg: &DetectorTrainConfig,
) -> Result<Vec<DetectorEpochLog>, DetectorError> {
    assert!(!items.is_empty());
    let mut opt = Adam::new(cfg.adam.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            crate::nn::zero_grads(model);
            let inv = T::from_usize_c(chunk.len());
            let mut batch_loss = T::zero();
            for &idx in chunk {
                let (x, target) = &items[idx];
                let (probs, cache) = model.forward(x)?;
                let (loss, mut g) = weighted_bce(&probs, target)?;
                for gv in g.iter_mut() {
                    *gv /= inv;
                }
                model.backward(&cache, &g);
                batch_loss += loss;
            }
            opt.step(&mut [model]).expect("detector is never frozen");
            epoch_loss += batch_loss.to_f64_c();
        }
        log.push(DetectorEpochLog {
            epoch,
            loss: epoch_loss / items.len() as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_detector_outputs_half() {
        let det = DetectorParams::<f64>::zeroed(DetectorConfig::default());
        let x = FrameFeatureSequence {
            features: Array2::from_elem((6, 8), 0.7),
            fps: 4.0,
        };
        let (probs, _) = det.forward(&x).unwrap();
        assert_eq!(probs.len(), 6);
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn output_length_matches_input_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let det = DetectorParams::<f64>::init(DetectorConfig::default(), &mut rng);
        for t in [1usize, 3, 17, 64] {
            let x = FrameFeatureSequence {
                features: Array2::from_shape_fn((t, 8), |(i, j)| ((i + j) % 5) as f64 * 0.1),
                fps: 4.0,
            };
            let (probs, _) = det.forward(&x).unwrap();
            assert_eq!(probs.len(), t);
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let det = DetectorParams::<f64>::init(DetectorConfig::default(), &mut rng);
        let x = FrameFeatureSequence {
            features: Array2::zeros((4, 5)),
            fps: 4.0,
        };
        assert!(matches!(
            det.forward(&x),
            Err(DetectorError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn symmetric_kernels_commute_with_time_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut det = DetectorParams::<f64>::init(
            DetectorConfig {
                in_dim: 3,
                hidden: 4,
                layers: 2,
                kernel: 5,
            },
            &mut rng,
        );
        // Symmetrize every temporal kernel.
        for conv in det.convs.iter_mut() {
            let k = conv.kernel();
            let shape = conv.weight.value.shape().to_vec();
            for o in 0..shape[0] {
                for ci in 0..shape[1] {
                    for d in 0..k / 2 {
                        let a = conv.weight.value[[o, ci, d]];
                        let b = conv.weight.value[[o, ci, k - 1 - d]];
                        let avg = (a + b) / 2.0;
                        conv.weight.value[[o, ci, d]] = avg;
                        conv.weight.value[[o, ci, k - 1 - d]] = avg;
                    }
                }
            }
        }
        let t = 12;
        let x = FrameFeatureSequence {
            features: Array2::from_shape_fn((t, 3), |(i, j)| ((i * 3 + j) % 7) as f64 * 0.2 - 0.5),
            fps: 4.0,
        };
        let mut rev_features = Array2::zeros((t, 3));
        for i in 0..t {
            for j in 0..3 {
                rev_features[(i, j)] = x.features[(t - 1 - i, j)];
            }
        }
        let x_rev = FrameFeatureSequence {
            features: rev_features,
            fps: 4.0,
        };
        let (p, _) = det.forward(&x).unwrap();
        let (p_rev, _) = det.forward(&x_rev).unwrap();
        for i in 0..t {
            assert!(
                (p[i] - p_rev[t - 1 - i]).abs() < 1e-12,
                "frame {i}: {} vs {}",
                p[i],
                p_rev[t - 1 - i]
            );
        }
    }

    #[test]
    fn bce_perfect_predictions_vanish() {
        let target = WeightedTarget {
            bits: vec![1, 0, 1],
            weights: vec![1.0, 1.0, 1.0],
        };
        let pred = vec![1.0f64, 0.0, 1.0];
        let (loss, _) = weighted_bce(&pred, &target).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn bce_uniform_half_is_log_two_for_any_weights() {
        let target = WeightedTarget {
            bits: vec![1, 0, 1, 0],
            weights: vec![0.5, 1.5, 2.0, 1.0],
        };
        let pred = vec![0.5f64; 4];
        let (loss, _) = weighted_bce(&pred, &target).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_is_invariant_to_weight_rescaling() {
        let pred = vec![0.3f64, 0.8, 0.6];
        let a = WeightedTarget {
            bits: vec![0, 1, 1],
            weights: vec![0.5, 1.5, 1.0],
        };
        let b = WeightedTarget {
            bits: vec![0, 1, 1],
            weights: vec![1.0, 3.0, 2.0],
        };
        let (la, _) = weighted_bce(&pred, &a).unwrap();
        let (lb, _) = weighted_bce(&pred, &b).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn bce_positive_unless_exact() {
        let target = WeightedTarget {
            bits: vec![1, 0],
            weights: vec![1.0, 1.0],
        };
        let (loss, _) = weighted_bce(&[0.9f64, 0.2], &target).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn threshold_rules() {
        let tl = threshold_predictions(&[0.5f64, 0.5], 2.0, 0.5);
        assert_eq!(tl.bits, vec![1, 1]);
        let tl = threshold_predictions(&[0.2f64, 0.8, 0.6], 3.0, 0.5);
        assert_eq!(tl.bits, vec![0, 1, 1]);
        // Monotone: raising the threshold never adds ones.
        let lo = threshold_predictions(&[0.2f64, 0.8, 0.6], 3.0, 0.3);
        let hi = threshold_predictions(&[0.2f64, 0.8, 0.6], 3.0, 0.7);
        for (l, h) in lo.bits.iter().zip(hi.bits.iter()) {
            assert!(h <= l);
        }
    }

    fn burst_audio(events: &[(f64, f64)], duration_s: f64) -> Waveform<f64> {
        let sr = 16_000usize;
        let mut samples = vec![0.0f64; (duration_s * sr as f64) as usize];
        for &(a, b) in events {
            let (i0, i1) = ((a * sr as f64) as usize, (b * sr as f64) as usize);
            for (i, s) in samples.iter_mut().enumerate().take(i1).skip(i0) {
                *s = 0.5 * (2.0 * std::f64::consts::PI * 800.0 * i as f64 / sr as f64).sin();
            }
        }
        Waveform::new(samples, sr as u32)
    }

    #[test]
    fn build_target_whole_clip_event() {
        let audio = burst_audio(&[(0.0, 2.0)], 2.0);
        let t = build_target(&audio, &ActivityConfig::default(), 8).unwrap();
        assert!(t.bits.iter().all(|&b| b == 1));
        assert!(t.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn build_target_weights_follow_durations() {
        // Events of 1 s and 3 s: weights 0.5 and 1.5.
        let audio = burst_audio(&[(0.5, 1.5), (2.5, 5.5)], 8.0);
        let t = build_target(&audio, &ActivityConfig::default(), 64).unwrap();
        let runs = BinaryTimeline::new(t.bits.clone(), 8.0).to_intervals();
        assert_eq!(runs.len(), 2);
        let mut seen = std::collections::BTreeSet::new();
        for (i, &b) in t.bits.iter().enumerate() {
            if b == 1 {
                seen.insert((t.weights[i] * 1e6).round() as i64);
            } else {
                assert_eq!(t.weights[i], 1.0);
            }
        }
        let weights: Vec<f64> = seen.iter().map(|&w| w as f64 / 1e6).collect();
        assert_eq!(weights.len(), 2);
        // Frame quantization keeps these within one frame of 0.5 / 1.5.
        assert!((weights[0] - 0.5).abs() < 0.1, "{weights:?}");
        assert!((weights[1] - 1.5).abs() < 0.1, "{weights:?}");
        // Mean of per-event weights is exactly 1.
        assert!((weights.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn build_target_silence() {
        let audio = Waveform::new(vec![0.0f64; 16_000], 16_000);
        let t = build_target(&audio, &ActivityConfig::default(), 16).unwrap();
        assert!(t.bits.iter().all(|&b| b == 0));
        assert!(t.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn frame_ap_ranks_correctly() {
        let probs = vec![0.9f64, 0.1, 0.8, 0.2];
        let labels = vec![1u8, 0, 1, 0];
        assert_eq!(frame_ap(&probs, &labels), 1.0);
        let labels_bad = vec![0u8, 1, 0, 1];
        assert!(frame_ap(&probs, &labels_bad) < 0.6);
    }
}
