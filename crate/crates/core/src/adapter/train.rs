//! Adapter training: the base denoiser stays frozen; the adapter, the
//! condition encoder, the zero fusion layers, and (optionally) the toy-local
//! text table receive updates. Batches are processed by parallel workers on
//! cloned models; gradients reduce in worker order, so runs are
//! deterministic for a fixed seed and worker count.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AdapterParams;
use crate::conditioning::{ConditionEncoder, ConditionSpec};
use crate::diffusion::loss::{dm_loss_item, randn_like};
use crate::diffusion::{DenoiserParams, NoiseSchedule, TextTable};
use crate::nn::{add_grads_from, zero_grads, Adam, AdamConfig, NnError, ParamModel};
use crate::num::Real;
use crate::pipeline::GenContext;
use crate::timeline::BinaryTimeline;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("base denoiser must be flagged frozen before adapter training")]
    BaseNotFrozen,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Shared training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Parallel worker count per batch. Gradients always reduce in worker
    /// order, so this only affects speed, not results, for a fixed value.
    pub workers: usize,
    /// Update the toy-local text table during adapter training.
    pub train_text_table: bool,
    /// Validate every k epochs (0 disables validation).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            workers: 8,
            train_text_table: true,
            val_every: 0,
        }
    }
}

/// One adapter training example. `cond` must already be rasterized at the
/// (truncated) mel frame grid that pairs with `z0`.
#[derive(Debug, Clone)]
pub struct AdapterTrainItem<T> {
    pub z0: Array3<T>,
    pub tokens: Vec<usize>,
    pub cond: ConditionSpec<T>,
}

/// Validation clip: prompt, condition, and the requested timeline.
#[derive(Debug, Clone)]
pub struct ValItem<T> {
    pub tokens: Vec<usize>,
    pub cond: ConditionSpec<T>,
    pub target: BinaryTimeline,
}

/// Everything needed to synthesize audio from validation samples.
pub struct ValContext<T> {
    pub items: Vec<ValItem<T>>,
    pub gen: GenContext,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_iou: Option<f64>,
}

pub type TrainLog = Vec<EpochLog>;

/// Deterministic per-epoch seed derivation.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ ((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Borrowed pieces of an adapter training run.
pub struct AdapterTrainSession<'a, T: Real> {
    pub base: &'a DenoiserParams<T>,
    pub adapter: &'a mut AdapterParams<T>,
    pub encoder: &'a mut ConditionEncoder<T>,
    pub text: &'a mut TextTable<T>,
    pub schedule: &'a NoiseSchedule<T>,
    pub opt: &'a mut Adam<T>,
}

/// Trains the adapter against the frozen base. Epochs are reproducible from
/// `(cfg.seed, epoch)`, so a run resumed at `start_epoch` continues
/// bit-exactly.
pub fn train_adapter<T: Real>(
    session: &mut AdapterTrainSession<'_, T>,
    items: &[AdapterTrainItem<T>],
    cfg: &TrainConfig,
    start_epoch: usize,
    val: Option<&ValContext<T>>,
) -> Result<TrainLog, TrainError> {
    if !session.base.frozen() {
        return Err(TrainError::BaseNotFrozen);
    }
    assert!(!items.is_empty(), "empty training set");
    let mut log = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for batch_idx in order.chunks(cfg.batch_size) {
            // Pre-draw the per-item step and noise so results do not depend
            // on worker scheduling.
            let draws: Vec<(usize, Array3<T>)> = batch_idx
                .iter()
                .map(|&i| {
                    let n = rng.gen_range(1..=session.schedule.steps());
                    let eps = randn_like::<T>(items[i].z0.dim(), &mut rng);
                    (n, eps)
                })
                .collect();

            zero_grads(session.adapter);
            zero_grads(session.encoder);
            zero_grads(session.text);

            let workers = cfg.workers.max(1).min(batch_idx.len());
            let chunk_len = batch_idx.len().div_ceil(workers);
            let batch_len = batch_idx.len();

            let base = session.base;
            let adapter_snapshot = &*session.adapter;
            let encoder_snapshot = &*session.encoder;
            let text_snapshot = &*session.text;
            let schedule = session.schedule;

            let results: Vec<_> = {
                use rayon::prelude::*;
                (0..workers)
                    .into_par_iter()
                    .map(|w| {
                        let lo = w * chunk_len;
                        let hi = (lo + chunk_len).min(batch_len);
                        let mut w_den = base.clone();
                        let mut w_ada = adapter_snapshot.clone();
                        let mut w_enc = encoder_snapshot.clone();
                        let mut w_text = text_snapshot.clone();
                        let mut loss = T::zero();
                        for k in lo..hi {
                            let item = &items[batch_idx[k]];
                            let (n, eps) = &draws[k];
                            let tau = w_text.embed(&item.tokens);
                            let (a_ct, enc_cache) =
                                w_enc.encode(&item.cond).expect("divisible cond shape");
                            let (item_loss, g_tau, g_a_ct) = dm_loss_item(
                                &mut w_den,
                                Some(&mut w_ada),
                                &item.z0,
                                &tau,
                                Some(&a_ct),
                                *n,
                                eps,
                                schedule,
                                batch_len,
                            );
                            loss += item_loss;
                            w_enc.backward(&enc_cache, &g_a_ct.expect("adapter path"));
                            if cfg.train_text_table {
                                w_text.backward(&item.tokens, &g_tau);
                            }
                        }
                        (loss, w_ada, w_enc, w_text)
                    })
                    .collect()
            };

            let mut batch_loss = T::zero();
            for (loss, w_ada, w_enc, w_text) in &results {
                batch_loss += *loss;
                add_grads_from(session.adapter, w_ada);
                add_grads_from(session.encoder, w_enc);
                if cfg.train_text_table {
                    add_grads_from(session.text, w_text);
                }
            }
            epoch_loss += batch_loss.to_f64_c();

            if cfg.train_text_table {
                session
                    .opt
                    .step(&mut [session.adapter, session.encoder, session.text])?;
            } else {
                session.opt.step(&mut [session.adapter, session.encoder])?;
            }
        }

        let val_iou = match val {
            Some(ctx) if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 => Some(
                validate_adapter(session.base, session.adapter, session.encoder, session.text,
                                 session.schedule, ctx),
            ),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / items.len() as f64,
            val_iou,
        });
    }
    Ok(log)
}

/// Mean timeline IoU of audio generated from validation prompts.
pub fn validate_adapter<T: Real>(
    base: &DenoiserParams<T>,
    adapter: &AdapterParams<T>,
    encoder: &ConditionEncoder<T>,
    text: &TextTable<T>,
    schedule: &NoiseSchedule<T>,
    ctx: &ValContext<T>,
) -> f64 {
    use rayon::prelude::*;
    let ious: Vec<f64> = ctx
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let audio = crate::pipeline::generate_clip(
                base,
                Some((adapter, encoder)),
                text,
                schedule,
                &item.cond,
                &item.tokens,
                ctx.seed.wrapping_add(i as u64),
                &ctx.gen,
            );
            match audio {
                Ok(w) => crate::metrics::evaluate_clip(&w, &item.target, &ctx.gen.activity)
                    .map(|r| r.iou)
                    .unwrap_or(0.0),
                Err(_) => 0.0,
            }
        })
        .collect();
    ious.iter().sum::<f64>() / ious.len().max(1) as f64
}

/// Borrowed pieces of a base (no adapter) pretraining run.
pub struct BaseTrainSession<'a, T: Real> {
    pub den: &'a mut DenoiserParams<T>,
    pub text: &'a mut TextTable<T>,
    pub schedule: &'a NoiseSchedule<T>,
    pub opt: &'a mut Adam<T>,
}

/// Caption-only pretraining of the base denoiser; stands in for the frozen
/// pretrained text-to-audio model.
pub fn train_base<T: Real>(
    session: &mut BaseTrainSession<'_, T>,
    items: &[(Array3<T>, Vec<usize>)],
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<TrainLog, TrainError> {
    assert!(!items.is_empty(), "empty training set");
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for batch_idx in order.chunks(cfg.batch_size) {
            let draws: Vec<(usize, Array3<T>)> = batch_idx
                .iter()
                .map(|&i| {
                    let n = rng.gen_range(1..=session.schedule.steps());
                    let eps = randn_like::<T>(items[i].0.dim(), &mut rng);
                    (n, eps)
                })
                .collect();

            zero_grads(session.den);
            zero_grads(session.text);

            let workers = cfg.workers.max(1).min(batch_idx.len());
            let chunk_len = batch_idx.len().div_ceil(workers);
            let batch_len = batch_idx.len();
            let den_snapshot = &*session.den;
            let text_snapshot = &*session.text;
            let schedule = session.schedule;

            let results: Vec<_> = {
                use rayon::prelude::*;
                (0..workers)
                    .into_par_iter()
                    .map(|w| {
                        let lo = w * chunk_len;
                        let hi = (lo + chunk_len).min(batch_len);
                        let mut w_den = den_snapshot.clone();
                        let mut w_text = text_snapshot.clone();
                        let mut loss = T::zero();
                        for k in lo..hi {
                            let (z0, tokens) = &items[batch_idx[k]];
                            let (n, eps) = &draws[k];
                            let tau = w_text.embed(tokens);
                            let (item_loss, g_tau, _) = dm_loss_item(
                                &mut w_den,
                                None,
                                z0,
                                &tau,
                                None,
                                *n,
                                eps,
                                schedule,
                                batch_len,
                            );
                            loss += item_loss;
                            w_text.backward(tokens, &g_tau);
                        }
                        (loss, w_den, w_text)
                    })
                    .collect()
            };

            let mut batch_loss = T::zero();
            for (loss, w_den, w_text) in &results {
                batch_loss += *loss;
                add_grads_from(session.den, w_den);
                add_grads_from(session.text, w_text);
            }
            epoch_loss += batch_loss.to_f64_c();
            session.opt.step(&mut [session.den, session.text])?;
        }
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / items.len() as f64,
            val_iou: None,
        });
    }
    Ok(log)
}

/// Restores an Adam optimizer with the given config at step `t` from stored
/// moment tensors.
pub fn restore_adam<T: Real>(
    cfg: AdamConfig,
    t: u64,
    state: std::collections::HashMap<String, crate::nn::MomentPair<T>>,
) -> Adam<T> {
    let mut opt = Adam::new(cfg);
    opt.t = t;
    opt.state = state;
    opt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_condition, ConditionMode};
    use crate::diffusion::{make_schedule, ModelConfig, Vocab};
    use crate::nn::param_count;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            channels: 4,
            attn_dim: 4,
            text_dim: 4,
            cond_hidden: 2,
            cond_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_items(cfg: &ModelConfig, n: usize) -> Vec<AdapterTrainItem<f64>> {
        (0..n)
            .map(|i| {
                let bits: Vec<u8> = (0..8).map(|j| u8::from((i + j) % 3 == 0)).collect();
                let tl = BinaryTimeline::new(bits, 8.0);
                let cond = build_condition(&tl, 8, ConditionMode::MaskOnly, None).unwrap();
                let z0 = Array3::from_shape_fn((cfg.latent_channels, 2, 2), |(_, a, b)| {
                    ((i + a * 2 + b) % 5) as f64 * 0.2
                });
                AdapterTrainItem {
                    z0,
                    tokens: vec![(i % 3) + 1],
                    cond,
                }
            })
            .collect()
    }

    #[test]
    fn training_requires_frozen_base() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let base = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
        let mut adapter = AdapterParams::init(cfg.clone(), &mut rng);
        let mut enc = ConditionEncoder::learned(&cfg, &mut rng);
        let vocab = Vocab::new(&["one", "two", "three"]);
        let mut text = TextTable::new(vocab.len(), cfg.text_dim, &mut rng);
        let schedule = make_schedule(4, 1e-3, 0.1).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let items = tiny_items(&cfg, 4);
        let mut session = AdapterTrainSession {
            base: &base,
            adapter: &mut adapter,
            encoder: &mut enc,
            text: &mut text,
            schedule: &schedule,
            opt: &mut opt,
        };
        let err = train_adapter(&mut session, &items, &TrainConfig::default(), 0, None);
        assert!(matches!(err, Err(TrainError::BaseNotFrozen)));
    }

    #[test]
    fn one_step_leaves_base_bit_identical_and_moves_zero_layers() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut base = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
        base.freeze();
        let mut adapter = AdapterParams::init(cfg.clone(), &mut rng);
        let mut enc = ConditionEncoder::learned(&cfg, &mut rng);
        let vocab = Vocab::new(&["one", "two", "three"]);
        let mut text = TextTable::new(vocab.len(), cfg.text_dim, &mut rng);
        let schedule = make_schedule(4, 1e-3, 0.1).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });

        let mut base_before: Vec<f64> = Vec::new();
        base.visit_params_ref(&mut |_, p| base_before.extend(p.value.iter().copied()));

        assert!(adapter.zero_layers_inert());
        let items = tiny_items(&cfg, 6);
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            workers: 2,
            ..TrainConfig::default()
        };
        let mut session = AdapterTrainSession {
            base: &base,
            adapter: &mut adapter,
            encoder: &mut enc,
            text: &mut text,
            schedule: &schedule,
            opt: &mut opt,
        };
        let log = train_adapter(&mut session, &items, &train_cfg, 0, None).unwrap();
        assert_eq!(log.len(), 2);

        let mut base_after: Vec<f64> = Vec::new();
        base.visit_params_ref(&mut |_, p| base_after.extend(p.value.iter().copied()));
        assert_eq!(base_before, base_after);

        // Zero layers have evolved away from zero.
        assert!(!adapter.zero_layers_inert());
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed_and_workers() {
        let cfg = tiny_cfg();
        let run = |workers: usize| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(73);
            let mut base = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
            base.freeze();
            let mut adapter = AdapterParams::init(cfg.clone(), &mut rng);
            let mut enc = ConditionEncoder::learned(&cfg, &mut rng);
            let mut text = TextTable::new(4, cfg.text_dim, &mut rng);
            let schedule = make_schedule(4, 1e-3, 0.1).unwrap();
            let mut opt = Adam::new(AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            });
            let items = tiny_items(&cfg, 8);
            let tc = TrainConfig {
                epochs: 2,
                batch_size: 4,
                workers,
                ..TrainConfig::default()
            };
            let mut session = AdapterTrainSession {
                base: &base,
                adapter: &mut adapter,
                encoder: &mut enc,
                text: &mut text,
                schedule: &schedule,
                opt: &mut opt,
            };
            train_adapter(&mut session, &items, &tc, 0, None).unwrap();
            let mut out = Vec::new();
            adapter.visit_params_ref(&mut |_, p| out.extend(p.value.iter().copied()));
            out
        };
        let a = run(2);
        let b = run(2);
        assert_eq!(a, b);
        assert!(param_count::<f64>(&AdapterParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))) > 0);
    }
}
