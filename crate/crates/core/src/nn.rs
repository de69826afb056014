//! Minimal neural-network plumbing: row-major tensors, cache-friendly
//! matrix products, affine layers, smooth activations, and a visitor over
//! named parameters that the optimizer and checkpoint code share.
//!
//! Backward passes are hand-written per layer; there is no tape. Each layer
//! owns its weights and matching gradient buffers, and `backward` both
//! accumulates weight gradients and returns input gradients, so a network is
//! differentiated by calling layer backwards in reverse composition order.

use rand::Rng;

use crate::rng::gaussian;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }
}

/// C[m x n] += A[m x k] * B[k x n], all row-major.
pub fn matmul_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// C[k x n] += A^T B for A[m x k], B[m x n]; the weight-gradient product.
pub fn matmul_at_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// C[m x k] += A B^T for A[m x n], B[k x n]; the input-gradient product.
pub fn matmul_bt_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// Sigmoid-weighted linear unit, the one nonlinearity used throughout; its
/// smoothness keeps finite-difference gradient checks clean.
#[inline]
pub fn silu<S: Real>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Real>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// d softplus / dx.
#[inline]
pub fn softplus_grad<S: Real>(x: S) -> S {
    sigmoid(x)
}

pub fn softmax3<S: Real>(logits: [S; 3]) -> [S; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

/// Backward through softmax3: given probabilities `p` and dL/dp, returns
/// dL/dlogits.
pub fn softmax3_backward<S: Real>(p: [S; 3], dp: [S; 3]) -> [S; 3] {
    let dot = p[0] * dp[0] + p[1] * dp[1] + p[2] * dp[2];
    [
        p[0] * (dp[0] - dot),
        p[1] * (dp[1] - dot),
        p[2] * (dp[2] - dot),
    ]
}

/// Mutable view of one named parameter tensor and its gradient buffer.
pub struct ParamRef<'a, S> {
    pub name: String,
    pub value: &'a mut Tensor<S>,
    pub grad: &'a mut Tensor<S>,
}

/// Anything holding trainable parameters. Visit order is fixed and is part of
/// the determinism contract (the optimizer walks parameters in this order).
pub trait Parameterized<S: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |p| p.grad.fill(S::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p| n += p.value.len());
        n
    }
}

/// Dense affine layer y = x W + b with W[in x out].
#[derive(Clone, Debug)]
pub struct Affine<S> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

impl<S: Real> Affine<S> {
    /// He-style init: N(0, gain / fan_in), zero bias.
    pub fn init(input_dim: usize, output_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / input_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| S::of(gaussian(rng) * std))
            .collect();
        Affine {
            input_dim,
            output_dim,
            w: Tensor::from_vec(&[input_dim, output_dim], data),
            b: Tensor::zeros(&[output_dim]),
            dw: Tensor::zeros(&[input_dim, output_dim]),
            db: Tensor::zeros(&[output_dim]),
        }
    }

    /// y[batch x out] = x[batch x in] W + b.
    pub fn forward(&self, x: &[S], batch: usize, y: &mut Vec<S>) {
        y.clear();
        y.reserve(batch * self.output_dim);
        for _ in 0..batch {
            y.extend_from_slice(&self.b.data);
        }
        matmul_acc(y, x, &self.w.data, batch, self.input_dim, self.output_dim);
    }

    /// Accumulates dW/db from (x, dy) and, when `dx` is given, adds the input
    /// gradient into it.
    pub fn backward(&mut self, x: &[S], dy: &[S], batch: usize, dx: Option<&mut [S]>) {
        matmul_at_acc(
            &mut self.dw.data,
            x,
            dy,
            batch,
            self.input_dim,
            self.output_dim,
        );
        for row in dy.chunks_exact(self.output_dim) {
            for (g, &d) in self.db.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        if let Some(dx) = dx {
            matmul_bt_acc(dx, dy, &self.w.data, batch, self.input_dim, self.output_dim);
        }
    }
}

impl<S: Real> Parameterized<S> for Affine<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        f(ParamRef {
            name: format!("{prefix}.w"),
            value: &mut self.w,
            grad: &mut self.dw,
        });
        f(ParamRef {
            name: format!("{prefix}.b"),
            value: &mut self.b,
            grad: &mut self.db,
        });
    }
}

/// Unrolls 3x3 patches (zero-padded by one pixel) of an HWC image into rows
/// of `cols`, one row per output site, elements in (ky, kx, channel) order.
/// Returns the output grid size.
pub fn im2col<S: Real>(
    x: &[S],
    h: usize,
    w: usize,
    c: usize,
    stride: usize,
    cols: &mut Vec<S>,
) -> (usize, usize) {
    debug_assert_eq!(x.len(), h * w * c);
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    cols.clear();
    cols.resize(oh * ow * 9 * c, S::zero());
    let mut idx = 0;
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - 1;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - 1;
            for ky in 0..3isize {
                let iy = iy0 + ky;
                for kx in 0..3isize {
                    let ix = ix0 + kx;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = (iy as usize * w + ix as usize) * c;
                        cols[idx..idx + c].copy_from_slice(&x[src..src + c]);
                    }
                    idx += c;
                }
            }
        }
    }
    (oh, ow)
}

/// Adjoint of [`im2col`]: scatter-adds patch-row gradients back onto the
/// zero-padded input grid.
pub fn col2im_acc<S: Real>(dcols: &[S], h: usize, w: usize, c: usize, stride: usize, dx: &mut [S]) {
    debug_assert_eq!(dx.len(), h * w * c);
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    debug_assert_eq!(dcols.len(), oh * ow * 9 * c);
    let mut idx = 0;
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - 1;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - 1;
            for ky in 0..3isize {
                let iy = iy0 + ky;
                for kx in 0..3isize {
                    let ix = ix0 + kx;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let dst = (iy as usize * w + ix as usize) * c;
                        for (d, &g) in dx[dst..dst + c].iter_mut().zip(&dcols[idx..idx + c]) {
                            *d += g;
                        }
                    }
                    idx += c;
                }
            }
        }
    }
}

/// 3x3 convolution over HWC maps, zero padding 1, stride 1 or 2. Weights are
/// stored pre-unrolled as [9*in_c, out_c] so forward is a single GEMM over
/// the im2col matrix.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

impl<S: Real> Conv2d<S> {
    pub fn init(in_c: usize, out_c: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2);
        let fan_in = 9 * in_c;
        let std = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * out_c)
            .map(|_| S::of(gaussian(rng) * std))
            .collect();
        Conv2d {
            in_c,
            out_c,
            stride,
            w: Tensor::from_vec(&[fan_in, out_c], data),
            b: Tensor::zeros(&[out_c]),
            dw: Tensor::zeros(&[fan_in, out_c]),
            db: Tensor::zeros(&[out_c]),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Pre-activation output, HWC.
    pub fn forward(&self, x: &[S], h: usize, w: usize) -> Vec<S> {
        let mut cols = Vec::new();
        let (oh, ow) = im2col(x, h, w, self.in_c, self.stride, &mut cols);
        let sites = oh * ow;
        let mut y = Vec::with_capacity(sites * self.out_c);
        for _ in 0..sites {
            y.extend_from_slice(&self.b.data);
        }
        matmul_acc(&mut y, &cols, &self.w.data, sites, 9 * self.in_c, self.out_c);
        y
    }

    /// Accumulates dW/db from the original input and dy; returns dx when
    /// `want_dx` (the first layer of a network can skip it).
    pub fn backward(
        &mut self,
        x: &[S],
        h: usize,
        w: usize,
        dy: &[S],
        want_dx: bool,
    ) -> Option<Vec<S>> {
        let mut cols = Vec::new();
        let (oh, ow) = im2col(x, h, w, self.in_c, self.stride, &mut cols);
        let sites = oh * ow;
        debug_assert_eq!(dy.len(), sites * self.out_c);
        matmul_at_acc(&mut self.dw.data, &cols, dy, sites, 9 * self.in_c, self.out_c);
        for row in dy.chunks_exact(self.out_c) {
            for (g, &d) in self.db.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dcols = vec![S::zero(); sites * 9 * self.in_c];
        matmul_bt_acc(&mut dcols, dy, &self.w.data, sites, 9 * self.in_c, self.out_c);
        let mut dx = vec![S::zero(); h * w * self.in_c];
        col2im_acc(&dcols, h, w, self.in_c, self.stride, &mut dx);
        Some(dx)
    }
}

impl<S: Real> Parameterized<S> for Conv2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        f(ParamRef {
            name: format!("{prefix}.w"),
            value: &mut self.w,
            grad: &mut self.dw,
        });
        f(ParamRef {
            name: format!("{prefix}.b"),
            value: &mut self.b,
            grad: &mut self.db,
        });
    }
}
