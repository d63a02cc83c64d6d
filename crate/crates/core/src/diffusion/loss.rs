//! Text-guided noise-estimation training loss with reverse-mode gradients.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::schedule::q_sample;
use super::{DenoiserParams, NoiseSchedule};
use crate::adapter::AdapterParams;
use crate::num::Real;

/// One training example: clean latent, token embeddings, and (when training
/// with the adapter) the encoded time condition.
#[derive(Debug, Clone)]
pub struct DmBatchItem<T> {
    pub z0: Array3<T>,
    pub tau: Array2<T>,
    pub a_ct: Option<Array3<T>>,
}

/// Loss value plus gradients wrt the batch inputs that upstream modules own
/// (token embeddings feed the text table, condition embeddings feed the
/// condition encoder). Model parameter gradients are accumulated in place.
#[derive(Debug)]
pub struct DmLossOutput<T> {
    pub loss: T,
    pub g_tau: Vec<Array2<T>>,
    pub g_a_ct: Vec<Option<Array3<T>>>,
}

/// Draws a standard-normal tensor; samples in f64 so the consumed rng
/// stream is identical for f32 and f64 runs.
pub(crate) fn randn_like<T: Real>(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<T> {
    Array3::from_shape_simple_fn(shape, || {
        T::from_f64_c(rng.sample::<f64, _>(rand_distr::StandardNormal))
    })
}

/// gamma ||eps - eps_hat||^2 together with its gradient wrt eps_hat,
/// pre-scaled by `inv_batch`.
pub(crate) fn residual_loss<T: Real>(
    eps_hat: &Array3<T>,
    eps: &Array3<T>,
    gamma: T,
    inv_batch: T,
) -> (T, Array3<T>) {
    let mut loss = T::zero();
    let two = T::from_f64_c(2.0);
    let g = ndarray::Zip::from(eps_hat).and(eps).map_collect(|&p, &e| {
        let d = p - e;
        loss += gamma * d * d;
        two * gamma * d * inv_batch
    });
    (loss, g)
}

/// Single-item forward/backward at a fixed step and noise draw. Gradients
/// are pre-scaled by `1/batch` so per-item contributions sum to the batch
/// mean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dm_loss_item<T: Real>(
    den: &mut DenoiserParams<T>,
    mut adapter: Option<&mut AdapterParams<T>>,
    z0: &Array3<T>,
    tau: &Array2<T>,
    a_ct: Option<&Array3<T>>,
    n: usize,
    eps: &Array3<T>,
    s: &NoiseSchedule<T>,
    batch: usize,
) -> (T, Array2<T>, Option<Array3<T>>) {
    let z_n = q_sample(z0, n, eps, s).expect("valid step");
    let gamma = s.gamma(n);
    let inv_batch = T::one() / T::from_usize_c(batch);

    let (base_skips, enc_cache) = den.encode(&z_n, n, tau);
    let mut g_tokens = Array2::zeros(tau.raw_dim());

    match adapter.as_deref_mut() {
        Some(ada) => {
            let a_ct = a_ct.expect("adapter training requires a condition embedding");
            let (acts, ada_cache) = ada.forward(&z_n, a_ct, n, tau);
            let (fused, fuse_cache) = ada.fuse_skips(&base_skips, &acts);
            let (eps_hat, dec_cache) = den.decode(&fused, n, tau);
            let (loss, g_eps) = residual_loss(&eps_hat, eps, gamma, inv_batch);

            let g_fused = den.decode_backward(&dec_cache, &g_eps, &mut g_tokens);
            let (g_base, g_acts) = ada.fuse_backward(&fuse_cache, &g_fused);
            let (_, g_a_ct) = ada.backward(&ada_cache, &g_acts, &mut g_tokens);
            den.encode_backward(&enc_cache, &g_base, &mut g_tokens);
            (loss, g_tokens, Some(g_a_ct))
        }
        None => {
            let (eps_hat, dec_cache) = den.decode(&base_skips, n, tau);
            let (loss, g_eps) = residual_loss(&eps_hat, eps, gamma, inv_batch);
            let g_skips = den.decode_backward(&dec_cache, &g_eps, &mut g_tokens);
            den.encode_backward(&enc_cache, &g_skips, &mut g_tokens);
            (loss, g_tokens, None)
        }
    }
}

/// Batch loss: for a sampled step n and noise draw per item,
/// mean over items of gamma_n ||eps - eps_hat(z_n, tau)||^2. Parameter
/// gradients accumulate into `den` (and `adapter` when given); gradients wrt
/// token and condition embeddings are returned.
pub fn dm_loss<T: Real>(
    items: &[DmBatchItem<T>],
    den: &mut DenoiserParams<T>,
    mut adapter: Option<&mut AdapterParams<T>>,
    s: &NoiseSchedule<T>,
    rng: &mut ChaCha8Rng,
) -> DmLossOutput<T> {
    assert!(!items.is_empty(), "batch must be non-empty");
    let batch = items.len();
    let mut total = T::zero();
    let mut g_tau = Vec::with_capacity(batch);
    let mut g_a_ct = Vec::with_capacity(batch);
    for item in items {
        let n = rng.gen_range(1..=s.steps());
        let eps = randn_like::<T>(item.z0.dim(), rng);
        let (loss, gt, ga) = dm_loss_item(
            den,
            adapter.as_deref_mut(),
            &item.z0,
            &item.tau,
            item.a_ct.as_ref(),
            n,
            &eps,
            s,
            batch,
        );
        total += loss;
        g_tau.push(gt);
        g_a_ct.push(ga);
    }
    DmLossOutput {
        loss: total / T::from_usize_c(batch),
        g_tau,
        g_a_ct,
    }
}
