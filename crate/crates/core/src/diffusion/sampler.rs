//! Ancestral DDPM sampler, deterministic for a fixed seed.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::randn_like;
use super::schedule::{posterior_mean, posterior_var};
use super::{DenoiserParams, NoiseSchedule};
use crate::adapter::AdapterParams;
use crate::num::Real;

/// Samples a latent by iterating the reverse process from seeded Gaussian
/// noise. When the adapter is given, its activations are fused into the
/// frozen decoder at every step; the rng stream is identical either way.
pub fn ddpm_sample<T: Real>(
    den: &DenoiserParams<T>,
    tau: &Array2<T>,
    adapter: Option<(&AdapterParams<T>, &Array3<T>)>,
    s: &NoiseSchedule<T>,
    seed: u64,
    shape: (usize, usize, usize),
) -> Array3<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = randn_like::<T>(shape, &mut rng);
    for n in (1..=s.steps()).rev() {
        let eps_hat = match adapter {
            Some((ada, a_ct)) => {
                let (base_skips, _) = den.encode(&z, n, tau);
                let (acts, _) = ada.forward(&z, a_ct, n, tau);
                let (fused, _) = ada.fuse_skips(&base_skips, &acts);
                den.decode(&fused, n, tau).0
            }
            None => den.forward(&z, n, tau, None).0,
        };
        let mu = posterior_mean(&z, &eps_hat, n, s).expect("step in range");
        if n > 1 {
            let sd = posterior_var(n, s).expect("step in range").sqrt();
            let xi = randn_like::<T>(shape, &mut rng);
            z = ndarray::Zip::from(&mu).and(&xi).map_collect(|&m, &x| m + sd * x);
        } else {
            z = mu;
        }
    }
    z
}
