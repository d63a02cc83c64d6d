//! Time-controllable adapter: a trainable mirror of the frozen denoiser's
//! encoder and middle block. The condition embedding enters only the
//! adapter; its block outputs feed the base decoder through zero-initialized
//! 1x1 fusion layers scaled by a conditioning scale, so a freshly
//! initialized adapter leaves the base model untouched.

mod train;

pub use train::{train_adapter, AdapterTrainItem, EpochLog, TrainConfig, TrainLog, ValContext};

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    sinusoidal_step_embedding, DenoiserParams, EncoderStack, ModelConfig, SkipStack,
};
use crate::nn::{Conv2d, Conv2dCache, Param, ParamModel};
use crate::num::Real;

/// Default conditioning scale (ablation optimum).
pub const DEFAULT_CONDITIONING_SCALE: f64 = 2.0;

/// Mirror encoder F', mirror middle M', per-skip zero fusion layers, and a
/// zero layer for the middle path.
#[derive(Debug, Clone)]
pub struct AdapterParams<T> {
    pub cfg: ModelConfig,
    /// Projects the condition embedding onto the latent channels before it
    /// is added to the noisy latent at the adapter input.
    pub proj: Conv2d<T>,
    pub mirror: EncoderStack<T>,
    pub zero_skips: Vec<Conv2d<T>>,
    pub zero_middle: Conv2d<T>,
    pub conditioning_scale: f64,
    /// Reproduce the fusion formula verbatim on the middle path
    /// (m + m', no zero layer, no scale) instead of the zero-gated default.
    pub literal_middle_fusion: bool,
    frozen: bool,
}

/// Adapter block outputs f'_1..f'_B and m'.
#[derive(Debug, Clone)]
pub struct AdapterActivations<T>(pub SkipStack<T>);

#[derive(Debug, Clone)]
pub struct AdapterCache<T> {
    proj: Conv2dCache<T>,
    mirror: crate::diffusion::EncoderCache<T>,
}

#[derive(Debug, Clone)]
pub struct FuseCache<T> {
    zero_skip_caches: Vec<Conv2dCache<T>>,
    zero_middle_cache: Option<Conv2dCache<T>>,
}

impl<T: Real> AdapterParams<T> {
    /// Fresh adapter with randomly initialized mirror blocks and exactly-zero
    /// fusion layers.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let proj = Conv2d::new(cfg.cond_channels, cfg.latent_channels, 1, 1, 0, rng);
        let mirror = EncoderStack::new(cfg.latent_channels, &cfg, rng);
        let zero_skips = (0..cfg.depth)
            .map(|_| Conv2d::zeroed(c, c, 1, 1, 0))
            .collect();
        let zero_middle = Conv2d::zeroed(c, c, 1, 1, 0);
        Self {
            cfg,
            proj,
            mirror,
            zero_skips,
            zero_middle,
            conditioning_scale: DEFAULT_CONDITIONING_SCALE,
            literal_middle_fusion: false,
            frozen: false,
        }
    }

    /// Adapter whose mirror blocks copy the base encoder and middle weights.
    pub fn mirroring(base: &DenoiserParams<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut adapter = Self::init(base.cfg.clone(), rng);
        adapter.mirror = base.encoder.clone();
        adapter
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// True while every zero fusion layer still outputs exactly zero.
    pub fn zero_layers_inert(&self) -> bool {
        let all_zero = |c: &Conv2d<T>| {
            c.weight.value.iter().all(|&v| v == T::zero())
                && c.bias.value.iter().all(|&v| v == T::zero())
        };
        self.zero_skips.iter().all(all_zero) && all_zero(&self.zero_middle)
    }

    /// Mirror forward pass over `z_n + proj(A_ct)`.
    pub fn forward(
        &self,
        z: &Array3<T>,
        a_ct: &Array3<T>,
        n: usize,
        tokens: &Array2<T>,
    ) -> (AdapterActivations<T>, AdapterCache<T>) {
        let (proj_out, proj_cache) = self.proj.forward(a_ct);
        assert_eq!(
            proj_out.dim(),
            z.dim(),
            "condition embedding shape {:?} does not project onto latent {:?}",
            a_ct.dim(),
            z.dim()
        );
        let x = z + &proj_out;
        let emb: Array1<T> = sinusoidal_step_embedding(n, self.cfg.step_dim());
        let (acts, mirror_cache) = self.mirror.forward(&x, &emb, tokens);
        (
            AdapterActivations(acts),
            AdapterCache {
                proj: proj_cache,
                mirror: mirror_cache,
            },
        )
    }

    /// Backward through the mirror and input projection. Returns
    /// (grad wrt z, grad wrt A_ct) and accumulates token gradients.
    pub fn backward(
        &mut self,
        cache: &AdapterCache<T>,
        g_acts: &SkipStack<T>,
        g_tokens: &mut Array2<T>,
    ) -> (Array3<T>, Array3<T>) {
        let g_input = self.mirror.backward(&cache.mirror, g_acts, g_tokens);
        let g_a_ct = self.proj.backward(&cache.proj, &g_input);
        (g_input, g_a_ct)
    }

    /// Decoder-side fusion: skip j becomes f_j + s * zero_j(f'_j); the middle
    /// becomes m + s * zero_m(m') (or the verbatim m + m' under
    /// `literal_middle_fusion`).
    pub fn fuse_skips(
        &self,
        base: &SkipStack<T>,
        acts: &AdapterActivations<T>,
    ) -> (SkipStack<T>, FuseCache<T>) {
        assert_eq!(base.depth(), acts.0.depth(), "skip depth mismatch");
        let s = T::from_f64_c(self.conditioning_scale);
        let mut skips = Vec::with_capacity(base.depth());
        let mut caches = Vec::with_capacity(base.depth());
        for (j, zero) in self.zero_skips.iter().enumerate() {
            let (gated, cache) = zero.forward(&acts.0.skips[j]);
            skips.push(&base.skips[j] + &gated.mapv(|v| v * s));
            caches.push(cache);
        }
        let (middle, zero_middle_cache) = if self.literal_middle_fusion {
            (&base.middle + &acts.0.middle, None)
        } else {
            let (gated, cache) = self.zero_middle.forward(&acts.0.middle);
            (&base.middle + &gated.mapv(|v| v * s), Some(cache))
        };
        (
            SkipStack { skips, middle },
            FuseCache {
                zero_skip_caches: caches,
                zero_middle_cache,
            },
        )
    }

    /// Backward through the fusion. Returns (grad wrt base skips, grad wrt
    /// adapter activations).
    pub fn fuse_backward(
        &mut self,
        cache: &FuseCache<T>,
        g_fused: &SkipStack<T>,
    ) -> (SkipStack<T>, SkipStack<T>) {
        let s = T::from_f64_c(self.conditioning_scale);
        let g_base = g_fused.clone();
        let mut g_act_skips = Vec::with_capacity(g_fused.depth());
        for (j, zero) in self.zero_skips.iter_mut().enumerate() {
            let scaled = g_fused.skips[j].mapv(|v| v * s);
            g_act_skips.push(zero.backward(&cache.zero_skip_caches[j], &scaled));
        }
        let g_act_middle = match (&cache.zero_middle_cache, self.literal_middle_fusion) {
            (Some(zc), false) => {
                let scaled = g_fused.middle.mapv(|v| v * s);
                self.zero_middle.backward(zc, &scaled)
            }
            _ => g_fused.middle.clone(),
        };
        (
            g_base,
            SkipStack {
                skips: g_act_skips,
                middle: g_act_middle,
            },
        )
    }
}

impl<T: Real> ParamModel<T> for AdapterParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit("ada.proj", f);
        self.mirror.visit("ada", f);
        for (i, z) in self.zero_skips.iter_mut().enumerate() {
            z.visit(&format!("ada.zero{i}"), f);
        }
        self.zero_middle.visit("ada.zero_mid", f);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit_ref("ada.proj", f);
        self.mirror.visit_ref("ada", f);
        for (i, z) in self.zero_skips.iter().enumerate() {
            z.visit_ref(&format!("ada.zero{i}"), f);
        }
        self.zero_middle.visit_ref("ada.zero_mid", f);
    }

    fn frozen(&self) -> bool {
        self.frozen
    }

    fn model_name(&self) -> &'static str {
        "adapter"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            depth: 3,
            channels: 4,
            attn_dim: 6,
            text_dim: 5,
            cond_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn tokens(cfg: &ModelConfig) -> Array2<f64> {
        Array2::from_shape_fn((2, cfg.text_dim), |(i, j)| {
            ((i * 3 + j) % 4) as f64 * 0.25 - 0.3
        })
    }

    #[test]
    fn mirrored_adapter_with_zero_condition_reproduces_base_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = cfg();
        let base = DenoiserParams::<f64>::init(c.clone(), &mut rng);
        let mut adapter = AdapterParams::mirroring(&base, &mut rng);
        // Zero projection: adapter input reduces to z exactly.
        adapter.proj.weight.value.fill(0.0);
        adapter.proj.bias.value.fill(0.0);

        let z = Array3::from_shape_fn((1, 4, 6), |(_, i, j)| (i * 6 + j) as f64 * 0.03);
        let a_ct = Array3::from_elem((c.cond_channels, 4, 6), 0.0);
        let t = tokens(&c);
        let (base_skips, _) = base.encode(&z, 5, &t);
        let (acts, _) = adapter.forward(&z, &a_ct, 5, &t);
        assert_eq!(base_skips.max_abs_diff(&acts.0), 0.0);
    }

    #[test]
    fn adapter_forward_is_deterministic_and_condition_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = cfg();
        let adapter = AdapterParams::<f64>::init(c.clone(), &mut rng);
        let z = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i + j) as f64 * 0.1);
        let t = tokens(&c);
        let a1 = Array3::from_elem((c.cond_channels, 4, 4), 0.2);
        let a2 = Array3::from_elem((c.cond_channels, 4, 4), 0.9);
        let (r1, _) = adapter.forward(&z, &a1, 3, &t);
        let (r1b, _) = adapter.forward(&z, &a1, 3, &t);
        assert_eq!(r1.0.max_abs_diff(&r1b.0), 0.0);
        let (r2, _) = adapter.forward(&z, &a2, 3, &t);
        assert!(r1.0.max_abs_diff(&r2.0) > 0.0);
    }

    #[test]
    fn fresh_zero_layers_leave_base_skips_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = cfg();
        let base = DenoiserParams::<f64>::init(c.clone(), &mut rng);
        let adapter = AdapterParams::<f64>::init(c.clone(), &mut rng);
        assert!(adapter.zero_layers_inert());

        let z = Array3::from_shape_fn((1, 4, 6), |(_, i, j)| (i * 2 + j) as f64 * 0.05);
        let t = tokens(&c);
        let a_ct = Array3::from_elem((c.cond_channels, 4, 6), 0.7);
        let (base_skips, _) = base.encode(&z, 2, &t);
        let (acts, _) = adapter.forward(&z, &a_ct, 2, &t);
        let (fused, _) = adapter.fuse_skips(&base_skips, &acts);
        assert_eq!(fused.max_abs_diff(&base_skips), 0.0);
    }

    #[test]
    fn zero_scale_annihilates_trained_zero_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let c = cfg();
        let base = DenoiserParams::<f64>::init(c.clone(), &mut rng);
        let mut adapter = AdapterParams::<f64>::init(c.clone(), &mut rng);
        // Pretend training moved the zero layers.
        for zc in adapter.zero_skips.iter_mut() {
            zc.weight.value.fill(0.31);
            zc.bias.value.fill(-0.11);
        }
        adapter.zero_middle.weight.value.fill(0.17);
        adapter.conditioning_scale = 0.0;

        let z = Array3::from_shape_fn((1, 4, 6), |(_, i, j)| (i * 3 + j) as f64 * 0.04);
        let t = tokens(&c);
        let a_ct = Array3::from_elem((c.cond_channels, 4, 6), 0.5);
        let (base_skips, _) = base.encode(&z, 2, &t);
        let (acts, _) = adapter.forward(&z, &a_ct, 2, &t);
        let (fused, _) = adapter.fuse_skips(&base_skips, &acts);
        assert_eq!(fused.max_abs_diff(&base_skips), 0.0);
    }

    #[test]
    fn fusion_pairs_skip_indices_mirrorwise() {
        // With B = 3, decoder block i consumes skip j with i + j = 4; check
        // the pairing through a marker value planted in one adapter skip.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let c = cfg();
        let base = DenoiserParams::<f64>::init(c.clone(), &mut rng);
        let mut adapter = AdapterParams::<f64>::init(c.clone(), &mut rng);
        for zc in adapter.zero_skips.iter_mut() {
            // Identity-ish zero layers so markers pass through.
            for ch in 0..c.channels {
                zc.weight.value[[ch, ch, 0, 0]] = 1.0;
            }
        }
        adapter.conditioning_scale = 1.0;
        let z = Array3::zeros((1, 2, 2));
        let t = tokens(&c);
        let a_ct = Array3::zeros((c.cond_channels, 2, 2));
        let (base_skips, _) = base.encode(&z, 1, &t);
        let (mut acts, _) = adapter.forward(&z, &a_ct, 1, &t);
        // Plant a marker in f'_2 (index 1); with i + j = B + 1 it must land
        // in decoder block i = 2's skip input, i.e. fused.skips[1].
        acts.0.skips[1].fill(100.0);
        acts.0.skips[0].fill(0.0);
        acts.0.skips[2].fill(0.0);
        acts.0.middle.fill(0.0);
        let (fused, _) = adapter.fuse_skips(&base_skips, &acts);
        let delta0 = fused.skips[0]
            .iter()
            .zip(base_skips.skips[0].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let delta1 = fused.skips[1]
            .iter()
            .zip(base_skips.skips[1].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(delta0, 0.0);
        assert!(delta1 > 50.0);
    }

    #[test]
    fn fuse_is_linear_in_adapter_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let c = cfg();
        let base = DenoiserParams::<f64>::init(c.clone(), &mut rng);
        let mut adapter = AdapterParams::<f64>::init(c.clone(), &mut rng);
        for zc in adapter.zero_skips.iter_mut() {
            zc.weight.value.fill(0.2);
        }
        adapter.zero_middle.weight.value.fill(0.1);

        let z = Array3::from_shape_fn((1, 2, 4), |(_, i, j)| (i + j) as f64 * 0.1);
        let t = tokens(&c);
        let a_ct = Array3::from_elem((c.cond_channels, 2, 4), 0.4);
        let (base_skips, _) = base.encode(&z, 1, &t);
        let (acts, _) = adapter.forward(&z, &a_ct, 1, &t);
        let mut doubled = acts.clone();
        for s in doubled.0.skips.iter_mut() {
            s.mapv_inplace(|v| 2.0 * v);
        }
        doubled.0.middle.mapv_inplace(|v| 2.0 * v);

        let (f1, _) = adapter.fuse_skips(&base_skips, &acts);
        let (f2, _) = adapter.fuse_skips(&base_skips, &doubled);
        // (f2 - base) must equal 2 (f1 - base) since zero layers have no bias.
        for j in 0..c.depth {
            for ((&a2, &a1), &b) in f2.skips[j]
                .iter()
                .zip(f1.skips[j].iter())
                .zip(base_skips.skips[j].iter())
            {
                assert!(((a2 - b) - 2.0 * (a1 - b)).abs() < 1e-12);
            }
        }
    }
}
