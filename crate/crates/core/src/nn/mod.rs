//! Minimal neural-network plumbing: parameters with accumulated gradients,
//! explicitly differentiated layers, and an Adam optimizer.
//!
//! Every layer implements its own reverse pass; correctness is pinned by
//! finite-difference checks in the unit and acceptance tests.

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig, MomentPair};
pub use layers::{
    sigmoid, silu, silu_backward, Conv1d, Conv1dCache, Conv2d, Conv2dCache, CrossAttention,
    CrossAttentionCache, Linear,
};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("attempted to update frozen parameters of `{0}`")]
    Frozen(String),
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Gaussian init with the given standard deviation. Draws are made in
    /// f64 so the consumed rng stream is identical for every scalar type.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            T::from_f64_c(v * std)
        });
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters. Traversal order is fixed by the
/// implementation, which makes gradient reduction deterministic.
pub trait ParamModel<T: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>));
    fn visit_params_ref(&self, f: &mut dyn FnMut(&str, &Param<T>));

    /// Frozen models must never be handed to an optimizer.
    fn frozen(&self) -> bool {
        false
    }

    /// Identifier used in error messages.
    fn model_name(&self) -> &'static str {
        "model"
    }
}

/// Clears accumulated gradients.
pub fn zero_grads<T: Real>(model: &mut dyn ParamModel<T>) {
    model.visit_params(&mut |_, p| p.zero_grad());
}

/// Adds `src`'s gradients into `dst`. Both must traverse identically.
pub fn add_grads_from<T: Real>(dst: &mut dyn ParamModel<T>, src: &dyn ParamModel<T>) {
    let mut grads: Vec<ArrayD<T>> = Vec::new();
    src.visit_params_ref(&mut |_, p| grads.push(p.grad.clone()));
    let mut i = 0;
    dst.visit_params(&mut |_, p| {
        p.grad.zip_mut_with(&grads[i], |a, &b| *a += b);
        i += 1;
    });
    assert_eq!(i, grads.len(), "param traversal mismatch");
}

/// Total scalar parameter count.
pub fn param_count<T: Real>(model: &dyn ParamModel<T>) -> usize {
    let mut n = 0;
    model.visit_params_ref(&mut |_, p| n += p.len());
    n
}

/// Reads the flat `idx`-th parameter scalar (traversal order).
pub fn get_param_scalar<T: Real>(model: &dyn ParamModel<T>, idx: usize) -> T {
    let mut remaining = idx;
    let mut out = None;
    model.visit_params_ref(&mut |_, p| {
        if out.is_none() {
            if remaining < p.len() {
                out = Some(p.value.as_slice().unwrap()[remaining]);
            } else {
                remaining -= p.len();
            }
        }
    });
    out.expect("parameter index out of range")
}

/// Writes the flat `idx`-th parameter scalar (traversal order).
pub fn set_param_scalar<T: Real>(model: &mut dyn ParamModel<T>, idx: usize, v: T) {
    let mut remaining = idx;
    let mut done = false;
    model.visit_params(&mut |_, p| {
        if !done {
            if remaining < p.len() {
                p.value.as_slice_mut().unwrap()[remaining] = v;
                done = true;
            } else {
                remaining -= p.len();
            }
        }
    });
    assert!(done, "parameter index out of range");
}

/// Reads the flat `idx`-th gradient scalar (traversal order).
pub fn get_grad_scalar<T: Real>(model: &dyn ParamModel<T>, idx: usize) -> T {
    let mut remaining = idx;
    let mut out = None;
    model.visit_params_ref(&mut |_, p| {
        if out.is_none() {
            if remaining < p.len() {
                out = Some(p.grad.as_slice().unwrap()[remaining]);
            } else {
                remaining -= p.len();
            }
        }
    });
    out.expect("parameter index out of range")
}
