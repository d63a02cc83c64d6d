//! Layers with hand-written reverse passes: 2-D/1-D convolution, linear,
//! single-head cross-attention, and the SiLU activation.

use ndarray::{Array1, Array2, Array3, Dimension};
use rand_chacha::ChaCha8Rng;

use super::Param;
use crate::num::Real;

/// x * sigmoid(x), elementwise.
pub fn silu<T: Real, D: Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given the pre-activation input.
pub fn silu_backward<T: Real, D: Dimension>(
    x: &ndarray::Array<T, D>,
    gy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g = *g * (s + v * s * (T::one() - s));
    });
    gx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// 2-D convolution over `[channels, height, width]` activations with zero
/// padding. Stride 1 keeps the spatial shape when `pad = kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>, // [c_out, c_in, kh, kw]
    pub bias: Param<T>,   // [c_out]
    pub stride: usize,
    pub pad: usize,
}

/// Input retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    pub x: Array3<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weight: Param::randn(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    /// All-zero weights and biases: outputs exactly zero for any input.
    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Param::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, Conv2dCache<T>) {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "input channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let c_out = self.c_out();
        let k = self.kernel();
        let mut y = Array3::zeros((c_out, ho, wo));

        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.value.as_slice().unwrap();
        let bs = self.bias.value.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();

        for o in 0..c_out {
            let y_base = o * ho * wo;
            ys[y_base..y_base + ho * wo].fill(bs[o]);
            for ci in 0..c_in {
                let x_base = ci * h * w;
                for di in 0..k {
                    for dj in 0..k {
                        let wv = ws[((o * c_in + ci) * k + di) * k + dj];
                        if wv == T::zero() {
                            continue;
                        }
                        for i in 0..ho {
                            let xi = (i * self.stride + di) as isize - self.pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xi = xi as usize;
                            if self.stride == 1 {
                                // Contiguous inner loop over the output row.
                                let j0 = self.pad.saturating_sub(dj);
                                let j1 = (w + self.pad - dj).min(wo);
                                if j0 >= j1 {
                                    continue;
                                }
                                let xoff = x_base + xi * w + j0 + dj - self.pad;
                                let yoff = y_base + i * wo + j0;
                                let xr = &xs[xoff..xoff + (j1 - j0)];
                                let yr = &mut ys[yoff..yoff + (j1 - j0)];
                                for (yv, &xv) in yr.iter_mut().zip(xr.iter()) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for j in 0..wo {
                                    let xj =
                                        (j * self.stride + dj) as isize - self.pad as isize;
                                    if xj < 0 || xj >= w as isize {
                                        continue;
                                    }
                                    ys[y_base + i * wo + j] +=
                                        wv * xs[x_base + xi * w + xj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, Conv2dCache { x: x.clone() })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<T>, gy: &Array3<T>) -> Array3<T> {
        let (c_in, h, w) = cache.x.dim();
        let (c_out, ho, wo) = gy.dim();
        let k = self.kernel();
        let mut gx = Array3::zeros((c_in, h, w));

        let xs = cache.x.as_slice().unwrap();
        let gys = gy.as_slice().expect("standard layout");
        let ws = self.weight.value.as_slice().unwrap();
        let gws = self.weight.grad.as_slice_mut().unwrap();
        let gbs = self.bias.grad.as_slice_mut().unwrap();
        let gxs = gx.as_slice_mut().unwrap();

        for o in 0..c_out {
            let gy_base = o * ho * wo;
            let mut b_acc = T::zero();
            for v in &gys[gy_base..gy_base + ho * wo] {
                b_acc += *v;
            }
            gbs[o] += b_acc;

            for ci in 0..c_in {
                let x_base = ci * h * w;
                for di in 0..k {
                    for dj in 0..k {
                        let widx = ((o * c_in + ci) * k + di) * k + dj;
                        let wv = ws[widx];
                        let mut w_acc = T::zero();
                        for i in 0..ho {
                            let xi = (i * self.stride + di) as isize - self.pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xi = xi as usize;
                            if self.stride == 1 {
                                let j0 = self.pad.saturating_sub(dj);
                                let j1 = (w + self.pad - dj).min(wo);
                                if j0 >= j1 {
                                    continue;
                                }
                                let xoff = x_base + xi * w + j0 + dj - self.pad;
                                let goff = gy_base + i * wo + j0;
                                let n = j1 - j0;
                                let xr = &xs[xoff..xoff + n];
                                let gr = &gys[goff..goff + n];
                                for (&xv, &gv) in xr.iter().zip(gr.iter()) {
                                    w_acc += xv * gv;
                                }
                                let gxr = &mut gxs[xoff..xoff + n];
                                for (gxv, &gv) in gxr.iter_mut().zip(gr.iter()) {
                                    *gxv += wv * gv;
                                }
                            } else {
                                for j in 0..wo {
                                    let xj =
                                        (j * self.stride + dj) as isize - self.pad as isize;
                                    if xj < 0 || xj >= w as isize {
                                        continue;
                                    }
                                    let xidx = x_base + xi * w + xj as usize;
                                    let gv = gys[gy_base + i * wo + j];
                                    w_acc += xs[xidx] * gv;
                                    gxs[xidx] += wv * gv;
                                }
                            }
                        }
                        gws[widx] += w_acc;
                    }
                }
            }
        }
        gx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
}

/// 1-D convolution over `[channels, time]` with same padding (odd kernels).
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Param<T>, // [c_out, c_in, k]
    pub bias: Param<T>,   // [c_out]
}

#[derive(Debug, Clone)]
pub struct Conv1dCache<T> {
    pub x: Array2<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "same padding requires an odd kernel");
        let fan_in = (c_in * kernel) as f64;
        Self {
            weight: Param::randn(&[c_out, c_in, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(&[c_out]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, Conv1dCache<T>) {
        let (c_in, t) = x.dim();
        let c_out = self.weight.value.shape()[0];
        assert_eq!(c_in, self.weight.value.shape()[1]);
        let k = self.kernel();
        let pad = k / 2;
        let mut y = Array2::zeros((c_out, t));
        for o in 0..c_out {
            let b = self.bias.value[[o]];
            for i in 0..t {
                let mut acc = b;
                for ci in 0..c_in {
                    for d in 0..k {
                        let xi = i as isize + d as isize - pad as isize;
                        if xi >= 0 && (xi as usize) < t {
                            acc += self.weight.value[[o, ci, d]] * x[(ci, xi as usize)];
                        }
                    }
                }
                y[(o, i)] = acc;
            }
        }
        (y, Conv1dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv1dCache<T>, gy: &Array2<T>) -> Array2<T> {
        let (c_in, t) = cache.x.dim();
        let (c_out, _) = gy.dim();
        let k = self.kernel();
        let pad = k / 2;
        let mut gx = Array2::zeros((c_in, t));
        for o in 0..c_out {
            let mut b_acc = T::zero();
            for i in 0..t {
                b_acc += gy[(o, i)];
            }
            self.bias.grad[[o]] += b_acc;
            for ci in 0..c_in {
                for d in 0..k {
                    let mut w_acc = T::zero();
                    let wv = self.weight.value[[o, ci, d]];
                    for i in 0..t {
                        let xi = i as isize + d as isize - pad as isize;
                        if xi >= 0 && (xi as usize) < t {
                            let g = gy[(o, i)];
                            w_acc += cache.x[(ci, xi as usize)] * g;
                            gx[(ci, xi as usize)] += wv * g;
                        }
                    }
                    self.weight.grad[[o, ci, d]] += w_acc;
                }
            }
        }
        gx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
}

/// Dense layer on vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>, // [out, in]
    pub bias: Param<T>,   // [out]
}

impl<T: Real> Linear<T> {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::randn(&[n_out, n_in], (2.0 / n_in as f64).sqrt(), rng),
            bias: Param::zeros(&[n_out]),
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        w.dot(x) + &b
    }

    /// Accumulates gradients given the cached input; returns grad wrt input.
    pub fn backward(&mut self, x: &Array1<T>, gy: &Array1<T>) -> Array1<T> {
        let (n_out, n_in) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        for o in 0..n_out {
            self.bias.grad[[o]] += gy[o];
            for i in 0..n_in {
                self.weight.grad[[o, i]] += gy[o] * x[i];
            }
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        w.t().dot(gy)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
}

/// Single-head cross-attention from spatial activations to token embeddings,
/// with a residual connection: `y = x + Wo * softmax(Qx . K_tok) V_tok`.
#[derive(Debug, Clone)]
pub struct CrossAttention<T> {
    pub wq: Param<T>, // [d_attn, channels]
    pub wk: Param<T>, // [d_attn, d_text]
    pub wv: Param<T>, // [d_attn, d_text]
    pub wo: Param<T>, // [channels, d_attn]
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCache<T> {
    x_flat: Array2<T>,   // [c, P]
    tokens: Array2<T>,   // [L, d_text]
    q: Array2<T>,        // [d_attn, P]
    k: Array2<T>,        // [d_attn, L]
    v: Array2<T>,        // [d_attn, L]
    attn: Array2<T>,     // [P, L] softmax rows
    z: Array2<T>,        // [d_attn, P]
    shape: (usize, usize, usize),
}

impl<T: Real> CrossAttention<T> {
    pub fn new(channels: usize, d_text: usize, d_attn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Param::randn(&[d_attn, channels], (1.0 / channels as f64).sqrt(), rng),
            wk: Param::randn(&[d_attn, d_text], (1.0 / d_text as f64).sqrt(), rng),
            wv: Param::randn(&[d_attn, d_text], (1.0 / d_text as f64).sqrt(), rng),
            wo: Param::randn(&[channels, d_attn], (1.0 / d_attn as f64).sqrt(), rng),
        }
    }

    pub fn d_attn(&self) -> usize {
        self.wq.value.shape()[0]
    }

    /// `x` is `[c, h, w]`, `tokens` is `[L, d_text]`.
    pub fn forward(
        &self,
        x: &Array3<T>,
        tokens: &Array2<T>,
    ) -> (Array3<T>, CrossAttentionCache<T>) {
        let (c, h, w) = x.dim();
        let p = h * w;
        let x_flat = x
            .view()
            .into_shape((c, p))
            .expect("standard layout")
            .to_owned();
        let wq = self.wq.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wk = self.wk.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = self.wv.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wo = self.wo.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();

        let q = wq.dot(&x_flat); // [d, P]
        let k = wk.dot(&tokens.t()); // [d, L]
        let v = wv.dot(&tokens.t()); // [d, L]
        let scale = T::from_f64_c(1.0 / (self.d_attn() as f64).sqrt());

        let mut scores = q.t().dot(&k); // [P, L]
        scores.mapv_inplace(|s| s * scale);
        // Row softmax.
        for mut row in scores.outer_iter_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let attn = scores;
        let z = v.dot(&attn.t()); // [d, P]
        let o = wo.dot(&z); // [c, P]
        let y_flat = &x_flat + &o;
        let y = y_flat.into_shape((c, h, w)).unwrap();
        (
            y,
            CrossAttentionCache {
                x_flat,
                tokens: tokens.clone(),
                q,
                k,
                v,
                attn,
                z,
                shape: (c, h, w),
            },
        )
    }

    /// Returns (grad wrt x, grad wrt tokens).
    pub fn backward(
        &mut self,
        cache: &CrossAttentionCache<T>,
        gy: &Array3<T>,
    ) -> (Array3<T>, Array2<T>) {
        let (c, h, w) = cache.shape;
        let p = h * w;
        let gy_flat = gy.view().into_shape((c, p)).expect("standard layout");
        let wo = self.wo.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wq = self.wq.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wk = self.wk.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = self.wv.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let scale = T::from_f64_c(1.0 / (self.d_attn() as f64).sqrt());

        // y = x + wo z
        let g_o = gy_flat; // [c, P]
        let g_wo = g_o.dot(&cache.z.t()); // [c, d]
        let g_z = wo.t().dot(&g_o); // [d, P]

        // z = v attn^T
        let g_v = g_z.dot(&cache.attn); // [d, L]
        let g_attn = g_z.t().dot(&cache.v); // [P, L]

        // Softmax backward per row.
        let mut g_scores = Array2::<T>::zeros(g_attn.raw_dim());
        for pi in 0..p {
            let a = cache.attn.row(pi);
            let ga = g_attn.row(pi);
            let dot: T = a.iter().zip(ga.iter()).map(|(&av, &gv)| av * gv).sum();
            for li in 0..a.len() {
                g_scores[(pi, li)] = a[li] * (ga[li] - dot);
            }
        }
        g_scores.mapv_inplace(|s| s * scale);

        // scores = q^T k
        let g_q = cache.k.dot(&g_scores.t()); // [d, P]
        let g_k = cache.q.dot(&g_scores); // [d, L]

        // q = wq x, k = wk tok^T, v = wv tok^T
        let g_wq = g_q.dot(&cache.x_flat.t());
        let g_x_attn = wq.t().dot(&g_q); // [c, P]
        let g_wk = g_k.dot(&cache.tokens);
        let g_wv = g_v.dot(&cache.tokens);
        let g_tokens = g_k.t().dot(&wk) + g_v.t().dot(&wv); // [L, d_text]

        self.wo.grad.zip_mut_with(&g_wo.into_dyn(), |a, &b| *a += b);
        self.wq.grad.zip_mut_with(&g_wq.into_dyn(), |a, &b| *a += b);
        self.wk.grad.zip_mut_with(&g_wk.into_dyn(), |a, &b| *a += b);
        self.wv.grad.zip_mut_with(&g_wv.into_dyn(), |a, &b| *a += b);

        let gx_flat = &g_x_attn + &gy_flat;
        (gx_flat.into_shape((c, h, w)).unwrap(), g_tokens)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
    }
}
