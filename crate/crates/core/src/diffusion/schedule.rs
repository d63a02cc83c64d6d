//! Noise schedule tables and the closed-form forward/reverse scalars.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::num::Real;

/// Schedule construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Toy profile; the full-scale profile is steps=1000, beta_max=0.02.
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
        }
    }
}

/// Per-step noise tables. Index 0 holds step n = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    pub betas: Vec<T>,
    pub alphas: Vec<T>,
    pub alpha_bars: Vec<T>,
    /// Loss weights; uniform 1.
    pub gammas: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    /// Builds tables from explicit betas, enforcing strict monotonicity and
    /// range (0, 1).
    pub fn from_betas(betas: Vec<T>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("no steps".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > T::zero() && b < T::one()) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "beta_{} = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
            if i > 0 && b <= betas[i - 1] {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "betas must increase strictly (beta_{} = {}, beta_{} = {})",
                    i,
                    betas[i - 1],
                    i + 1,
                    b
                )));
            }
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = T::one();
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let gammas = vec![T::one(); betas.len()];
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            gammas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, n: usize) -> Result<(), DiffusionError> {
        if n == 0 || n > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                n,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> T {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> T {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> T {
        self.alpha_bars[n - 1]
    }

    pub fn gamma(&self, n: usize) -> T {
        self.gammas[n - 1]
    }
}

/// Linear beta spacing between `beta_min` and `beta_max` over `n` steps.
pub fn make_schedule<T: Real>(
    n: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule<T>, DiffusionError> {
    if n < 2 {
        return Err(DiffusionError::InvalidSchedule(
            "need at least 2 steps (use from_betas for degenerate schedules)".into(),
        ));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_min < beta_max < 1 (got {beta_min}, {beta_max})"
        )));
    }
    let betas = (0..n)
        .map(|i| T::from_f64_c(beta_min + (beta_max - beta_min) * i as f64 / (n - 1) as f64))
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl ScheduleConfig {
    pub fn build<T: Real>(&self) -> Result<NoiseSchedule<T>, DiffusionError> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Closed-form forward sample: sqrt(abar_n) z0 + sqrt(1 - abar_n) eps.
pub fn q_sample<T: Real>(
    z0: &Array3<T>,
    n: usize,
    eps: &Array3<T>,
    s: &NoiseSchedule<T>,
) -> Result<Array3<T>, DiffusionError> {
    s.check_step(n)?;
    if z0.dim() != eps.dim() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "z0 {:?} vs eps {:?}",
            z0.dim(),
            eps.dim()
        )));
    }
    let ab = s.alpha_bar(n);
    let a = ab.sqrt();
    let b = (T::one() - ab).sqrt();
    Ok(ndarray::Zip::from(z0)
        .and(eps)
        .map_collect(|&z, &e| a * z + b * e))
}

/// One forward Markov step: sqrt(1 - beta_n) z_{n-1} + sqrt(beta_n) eps.
pub fn forward_step<T: Real>(
    z_prev: &Array3<T>,
    n: usize,
    eps: &Array3<T>,
    s: &NoiseSchedule<T>,
) -> Result<Array3<T>, DiffusionError> {
    s.check_step(n)?;
    let beta = s.beta(n);
    let a = (T::one() - beta).sqrt();
    let b = beta.sqrt();
    Ok(ndarray::Zip::from(z_prev)
        .and(eps)
        .map_collect(|&z, &e| a * z + b * e))
}

/// Reverse-process mean:
/// (1/sqrt(alpha_n)) [z_n - ((1 - alpha_n)/sqrt(1 - abar_n)) eps_hat].
pub fn posterior_mean<T: Real>(
    z_n: &Array3<T>,
    eps_hat: &Array3<T>,
    n: usize,
    s: &NoiseSchedule<T>,
) -> Result<Array3<T>, DiffusionError> {
    s.check_step(n)?;
    let alpha = s.alpha(n);
    let ab = s.alpha_bar(n);
    let inv_sqrt_a = T::one() / alpha.sqrt();
    let coeff = (T::one() - alpha) / (T::one() - ab).sqrt();
    Ok(ndarray::Zip::from(z_n)
        .and(eps_hat)
        .map_collect(|&z, &e| inv_sqrt_a * (z - coeff * e)))
}

/// Reverse-process variance ((1 - abar_{n-1})/(1 - abar_n)) beta_n; the
/// final step n = 1 is deterministic and returns 0.
pub fn posterior_var<T: Real>(n: usize, s: &NoiseSchedule<T>) -> Result<T, DiffusionError> {
    s.check_step(n)?;
    if n == 1 {
        return Ok(T::zero());
    }
    Ok((T::one() - s.alpha_bar(n - 1)) / (T::one() - s.alpha_bar(n)) * s.beta(n))
}
