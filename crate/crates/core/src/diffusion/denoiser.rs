//! U-Net style denoiser: B encoder blocks, one middle block, B decoder
//! blocks consuming (possibly adapter-fused) skips, a 1x1 output head.
//! Every block injects the sinusoidal step embedding and cross-attends the
//! text condition.

use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::nn::{
    silu, silu_backward, Conv2d, Conv2dCache, CrossAttention, CrossAttentionCache, Linear, Param,
    ParamModel,
};
use crate::num::Real;

/// Sinusoidal embedding of a diffusion step index. `dim` must be even.
pub fn sinusoidal_step_embedding<T: Real>(n: usize, dim: usize) -> Array1<T> {
    assert!(dim >= 2 && dim % 2 == 0, "step embedding dim must be even");
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / half as f64).exp();
        let arg = n as f64 * freq;
        e[2 * i] = T::from_f64_c(arg.sin());
        e[2 * i + 1] = T::from_f64_c(arg.cos());
    }
    e
}

/// Conv + step bias + SiLU + cross-attention.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub conv: Conv2d<T>,
    pub step: Linear<T>,
    pub attn: CrossAttention<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    conv: Conv2dCache<T>,
    step_in: Array1<T>,
    pre_act: Array3<T>,
    attn: CrossAttentionCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new(c_in: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            conv: Conv2d::new(c_in, c, 3, 1, 1, rng),
            step: Linear::new(cfg.step_dim(), c, rng),
            attn: CrossAttention::new(c, cfg.text_dim, cfg.attn_dim, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Array3<T>,
        step_emb: &Array1<T>,
        tokens: &Array2<T>,
    ) -> (Array3<T>, BlockCache<T>) {
        let (mut h, conv_cache) = self.conv.forward(x);
        let bias = self.step.forward(step_emb);
        for (ch, mut plane) in h.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v + bias[ch]);
        }
        let pre_act = h.clone();
        let act = silu(&h);
        let (y, attn_cache) = self.attn.forward(&act, tokens);
        (
            y,
            BlockCache {
                conv: conv_cache,
                step_in: step_emb.clone(),
                pre_act,
                attn: attn_cache,
            },
        )
    }

    /// Returns grad wrt the block input and accumulates `g_tokens`.
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        gy: &Array3<T>,
        g_tokens: &mut Array2<T>,
    ) -> Array3<T> {
        let (g_act, g_tok) = self.attn.backward(&cache.attn, gy);
        *g_tokens += &g_tok;
        let g_pre = silu_backward(&cache.pre_act, &g_act);
        let g_bias = Array1::from_iter(g_pre.outer_iter().map(|plane| plane.sum()));
        self.step.backward(&cache.step_in, &g_bias);
        self.conv.backward(&cache.conv, &g_pre)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.step.visit(&format!("{prefix}.step"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_ref(&format!("{prefix}.conv"), f);
        self.step.visit_ref(&format!("{prefix}.step"), f);
        self.attn.visit_ref(&format!("{prefix}.attn"), f);
    }
}

/// Encoder block outputs f_1..f_B plus the middle output m.
#[derive(Debug, Clone)]
pub struct SkipStack<T> {
    pub skips: Vec<Array3<T>>,
    pub middle: Array3<T>,
}

impl<T: Real> SkipStack<T> {
    pub fn depth(&self) -> usize {
        self.skips.len()
    }

    pub fn zeros_like(other: &SkipStack<T>) -> Self {
        Self {
            skips: other
                .skips
                .iter()
                .map(|s| Array3::zeros(s.raw_dim()))
                .collect(),
            middle: Array3::zeros(other.middle.raw_dim()),
        }
    }

    pub fn max_abs_diff(&self, other: &SkipStack<T>) -> T {
        let mut m = T::zero();
        for (a, b) in self.skips.iter().zip(other.skips.iter()) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        for (&x, &y) in self.middle.iter().zip(other.middle.iter()) {
            m = m.max((x - y).abs());
        }
        m
    }
}

/// B blocks plus a middle block; used both as the base denoiser encoder and
/// as the adapter mirror.
#[derive(Debug, Clone)]
pub struct EncoderStack<T> {
    pub blocks: Vec<Block<T>>,
    pub middle: Block<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    middle: BlockCache<T>,
}

impl<T: Real> EncoderStack<T> {
    pub fn new(c_in: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c = if i == 0 { c_in } else { cfg.channels };
            blocks.push(Block::new(c, cfg, rng));
        }
        Self {
            blocks,
            middle: Block::new(cfg.channels, cfg, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Array3<T>,
        step_emb: &Array1<T>,
        tokens: &Array2<T>,
    ) -> (SkipStack<T>, EncoderCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, cache) = block.forward(&h, step_emb, tokens);
            caches.push(cache);
            skips.push(y.clone());
            h = y;
        }
        let (m, mcache) = self.middle.forward(&h, step_emb, tokens);
        (
            SkipStack { skips, middle: m },
            EncoderCache {
                blocks: caches,
                middle: mcache,
            },
        )
    }

    /// Backward from gradients on every skip and the middle output; returns
    /// grad wrt the stack input.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<T>,
        g_out: &SkipStack<T>,
        g_tokens: &mut Array2<T>,
    ) -> Array3<T> {
        let mut carry = self
            .middle
            .backward(&cache.middle, &g_out.middle, g_tokens);
        for bi in (0..self.blocks.len()).rev() {
            let g_total = &carry + &g_out.skips[bi];
            carry = self.blocks[bi].backward(&cache.blocks[bi], &g_total, g_tokens);
        }
        carry
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.enc{i}"), f);
        }
        self.middle.visit(&format!("{prefix}.mid"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_ref(&format!("{prefix}.enc{i}"), f);
        }
        self.middle.visit_ref(&format!("{prefix}.mid"), f);
    }
}

/// Full denoiser parameters.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T> {
    pub cfg: ModelConfig,
    pub encoder: EncoderStack<T>,
    pub decoder: Vec<Block<T>>,
    pub head: Conv2d<T>,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    blocks: Vec<BlockCache<T>>,
    head: Conv2dCache<T>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = EncoderStack::new(cfg.latent_channels, &cfg, rng);
        let mut decoder = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            decoder.push(Block::new(cfg.channels * 2, &cfg, rng));
        }
        let head = Conv2d::new(cfg.channels, cfg.latent_channels, 1, 1, 0, rng);
        Self {
            cfg,
            encoder,
            decoder,
            head,
            frozen: false,
        }
    }

    /// All-zero parameters; used by shape/identity tests.
    pub fn zeroed(cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(cfg, &mut rng);
        model.visit_params(&mut |_, p| {
            p.value.fill(T::zero());
        });
        model
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn step_embedding(&self, n: usize) -> Array1<T> {
        sinusoidal_step_embedding(n, self.cfg.step_dim())
    }

    /// Runs encoder blocks and the middle block.
    pub fn encode(
        &self,
        z: &Array3<T>,
        n: usize,
        tokens: &Array2<T>,
    ) -> (SkipStack<T>, EncoderCache<T>) {
        let emb = self.step_embedding(n);
        self.encoder.forward(z, &emb, tokens)
    }

    /// Runs decoder blocks over a (possibly fused) skip stack. Decoder block
    /// i consumes Concat(previous output, skip j) with i + j = B + 1; block 1
    /// pairs the middle output with skip B.
    pub fn decode(
        &self,
        skips: &SkipStack<T>,
        n: usize,
        tokens: &Array2<T>,
    ) -> (Array3<T>, DecodeCache<T>) {
        let b = self.depth();
        assert_eq!(skips.depth(), b, "skip stack depth mismatch");
        let emb = self.step_embedding(n);
        let mut caches = Vec::with_capacity(b);
        let mut h = skips.middle.clone();
        for (di, block) in self.decoder.iter().enumerate() {
            let skip = &skips.skips[b - 1 - di];
            let x = concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            let (y, cache) = block.forward(&x, &emb, tokens);
            caches.push(cache);
            h = y;
        }
        let (eps, head_cache) = self.head.forward(&h);
        (
            eps,
            DecodeCache {
                blocks: caches,
                head: head_cache,
            },
        )
    }

    /// Backward through the decoder; returns gradients wrt the skip stack
    /// that was fed to [`Self::decode`].
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache<T>,
        g_eps: &Array3<T>,
        g_tokens: &mut Array2<T>,
    ) -> SkipStack<T> {
        let b = self.depth();
        let c = self.cfg.channels;
        let mut g_skips: Vec<Array3<T>> = (0..b).map(|_| Array3::zeros((0, 0, 0))).collect();
        let mut carry = self.head.backward(&cache.head, g_eps);
        for di in (0..b).rev() {
            let g_input = self.decoder[di].backward(&cache.blocks[di], &carry, g_tokens);
            let g_prev = g_input.slice(ndarray::s![0..c, .., ..]).to_owned();
            let g_skip = g_input.slice(ndarray::s![c..2 * c, .., ..]).to_owned();
            g_skips[b - 1 - di] = g_skip;
            carry = g_prev;
        }
        SkipStack {
            skips: g_skips,
            middle: carry,
        }
    }

    /// Backward through encoder and middle given gradients on their outputs.
    pub fn encode_backward(
        &mut self,
        cache: &EncoderCache<T>,
        g_out: &SkipStack<T>,
        g_tokens: &mut Array2<T>,
    ) -> Array3<T> {
        self.encoder.backward(cache, g_out, g_tokens)
    }

    /// Full forward pass. When `fused_skips` is given the decoder consumes
    /// it instead of the encoder's own stack (adapter fusion path); the
    /// encoder stack is returned either way.
    pub fn forward(
        &self,
        z: &Array3<T>,
        n: usize,
        tokens: &Array2<T>,
        fused_skips: Option<&SkipStack<T>>,
    ) -> (Array3<T>, SkipStack<T>) {
        let (own, _) = self.encode(z, n, tokens);
        let (eps, _) = match fused_skips {
            Some(fused) => self.decode(fused, n, tokens),
            None => self.decode(&own, n, tokens),
        };
        (eps, own)
    }
}

use rand::SeedableRng;

impl<T: Real> ParamModel<T> for DenoiserParams<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit("den", f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit(&format!("den.dec{i}"), f);
        }
        self.head.visit("den.head", f);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit_ref("den", f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit_ref(&format!("den.dec{i}"), f);
        }
        self.head.visit_ref("den.head", f);
    }

    fn frozen(&self) -> bool {
        self.frozen
    }

    fn model_name(&self) -> &'static str {
        "denoiser"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            channels: 4,
            attn_dim: 6,
            text_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn tokens(l: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((l, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4)
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = small_cfg();
        let den = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
        for (h, w) in [(4, 8), (2, 5), (1, 1), (6, 3)] {
            let z = Array3::from_shape_fn((1, h, w), |(_, i, j)| (i + j) as f64 * 0.1);
            let (eps, skips) = den.forward(&z, 3, &tokens(2, cfg.text_dim), None);
            assert_eq!(eps.dim(), z.dim());
            assert_eq!(skips.depth(), cfg.depth);
        }
    }

    #[test]
    fn zero_params_zero_input_zero_output() {
        let cfg = small_cfg();
        let den = DenoiserParams::<f64>::zeroed(cfg.clone());
        let z = Array3::zeros((1, 3, 4));
        let (eps, _) = den.forward(&z, 1, &Array2::zeros((2, cfg.text_dim)), None);
        assert!(eps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_tokens_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = small_cfg();
        let den = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
        let z = Array3::from_shape_fn((1, 3, 4), |(_, i, j)| (i * 4 + j) as f64 * 0.05);
        let t = tokens(3, cfg.text_dim);
        let (a, _) = den.forward(&z, 2, &t, None);
        let (b, _) = den.forward(&z, 2, &t.mapv(|v| 2.0 * v), None);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small_cfg();
        let den = DenoiserParams::<f64>::init(cfg.clone(), &mut rng);
        let z = Array3::from_shape_fn((1, 2, 6), |(_, i, j)| (i * 6 + j) as f64 * 0.07);
        let t = tokens(2, cfg.text_dim);
        let (a, _) = den.forward(&z, 4, &t, None);
        let (b, _) = den.forward(&z, 4, &t, None);
        assert_eq!(a, b);
    }

    #[test]
    fn step_embedding_distinguishes_steps() {
        let a = sinusoidal_step_embedding::<f64>(1, 8);
        let b = sinusoidal_step_embedding::<f64>(2, 8);
        assert_ne!(a, b);
        assert_eq!(a.len(), 8);
    }
}
