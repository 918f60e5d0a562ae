//! Minimal layer stack with hand-written backward passes.
//!
//! A [`Network`] owns one flat parameter vector and one flat buffer vector
//! (batch-norm running statistics); layers address them by offset. Keeping
//! parameters flat makes the momentum update, the optimizer and finite
//! difference checks plain slice operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Batch of feature maps in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Flat `n x features` view of a batch of feature vectors.
    pub fn from_rows(n: usize, features: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * features);
        Tensor { n, c: features, h: 1, w: 1, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics.
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        c: usize,
        gamma: usize,
        beta: usize,
        running: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Linear {
        in_f: usize,
        out_f: usize,
        weight: usize,
        bias: usize,
    },
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

enum Cache {
    Conv { cols: Vec<f64>, in_shape: [usize; 4], out_hw: (usize, usize) },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    GlobalAvgPool { in_shape: [usize; 4] },
    Linear { input: Vec<f64> },
    Residual { body: Vec<Cache>, shortcut: Vec<Cache>, mask: Vec<bool> },
}

/// Saved activations of one forward pass, consumed by [`Network::backward`].
pub struct Trace {
    caches: Vec<Cache>,
}

fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering every index reachable through the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn im2col(x: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, (oh, ow): (usize, usize), cols: &mut [f64]) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, (oh, ow): (usize, usize), dx: &mut [f64]) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Layer {
    fn forward(&self, params: &[f64], buffers: &mut [f64], mode: Mode, x: Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        match *self {
            Layer::Conv { in_c, out_c, k, stride, pad, weight, bias } => {
                assert_eq!(x.c, in_c, "conv input channels");
                let (oh, ow) = (out_size(x.h, k, stride, pad), out_size(x.w, k, stride, pad));
                let plane = oh * ow;
                let ck2 = in_c * k * k;
                let w = &params[weight..weight + out_c * ck2];
                let mut y = Tensor::zeros(x.n, out_c, oh, ow);
                let mut all_cols = if keep { vec![0.0; x.n * ck2 * plane] } else { Vec::new() };
                let mut scratch = vec![0.0; ck2 * plane];
                for s in 0..x.n {
                    let cols: &mut [f64] = if keep { &mut all_cols[s * ck2 * plane..(s + 1) * ck2 * plane] } else { &mut scratch };
                    im2col(x.sample(s), [x.c, x.h, x.w], k, stride, pad, (oh, ow), cols);
                    let ys = &mut y.data[s * out_c * plane..(s + 1) * out_c * plane];
                    if let Some(b) = bias {
                        for (o, row) in ys.chunks_exact_mut(plane).enumerate() {
                            row.fill(params[b + o]);
                        }
                    }
                    gemm(out_c, ck2, plane, w, (ck2 as isize, 1), cols, (plane as isize, 1), 1.0, ys);
                }
                let cache = keep.then(|| Cache::Conv { cols: all_cols, in_shape: [x.n, x.c, x.h, x.w], out_hw: (oh, ow) });
                (y, cache)
            }
            Layer::BatchNorm { c, gamma, beta, running } => {
                let plane = x.h * x.w;
                let m = (x.n * plane) as f64;
                let mut y = x.clone();
                let mut xhat = vec![0.0; x.data.len()];
                let mut inv_std = vec![0.0; c];
                let train = mode == Mode::Train;
                for ch in 0..c {
                    let idx = |s: usize| (s * c + ch) * plane;
                    let (mean, var) = if train {
                        let sum: f64 = (0..x.n).map(|s| x.data[idx(s)..idx(s) + plane].iter().sum::<f64>()).sum();
                        let mean = sum / m;
                        let sq: f64 =
                            (0..x.n).map(|s| x.data[idx(s)..idx(s) + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()).sum();
                        let unbiased = if m > 1.0 { sq / (m - 1.0) } else { sq / m };
                        buffers[running + ch] = (1.0 - BN_MOMENTUM) * buffers[running + ch] + BN_MOMENTUM * mean;
                        buffers[running + c + ch] = (1.0 - BN_MOMENTUM) * buffers[running + c + ch] + BN_MOMENTUM * unbiased;
                        (mean, sq / m)
                    } else {
                        (buffers[running + ch], buffers[running + c + ch])
                    };
                    inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
                    let (g, b) = (params[gamma + ch], params[beta + ch]);
                    for s in 0..x.n {
                        for j in idx(s)..idx(s) + plane {
                            xhat[j] = (x.data[j] - mean) * inv_std[ch];
                            y.data[j] = g * xhat[j] + b;
                        }
                    }
                }
                let cache = keep.then(|| Cache::BatchNorm { xhat, inv_std, train });
                (y, cache)
            }
            Layer::Relu => {
                let mut y = x;
                let mask: Vec<bool> = y.data.iter().map(|&v| v > 0.0).collect();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                (y, keep.then_some(Cache::Relu { mask }))
            }
            Layer::MaxPool { k, stride, pad } => {
                let (oh, ow) = (out_size(x.h, k, stride, pad), out_size(x.w, k, stride, pad));
                let mut y = Tensor::zeros(x.n, x.c, oh, ow);
                let mut argmax = vec![0usize; y.data.len()];
                for nc in 0..x.n * x.c {
                    let base = nc * x.h * x.w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = base;
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy as usize >= x.h {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= x.w {
                                        continue;
                                    }
                                    let j = base + iy as usize * x.w + ix as usize;
                                    if x.data[j] > best {
                                        best = x.data[j];
                                        at = j;
                                    }
                                }
                            }
                            let o = (nc * oh + oy) * ow + ox;
                            y.data[o] = best;
                            argmax[o] = at;
                        }
                    }
                }
                let cache = keep.then(|| Cache::MaxPool { argmax, in_shape: [x.n, x.c, x.h, x.w] });
                (y, cache)
            }
            Layer::GlobalAvgPool => {
                let plane = x.h * x.w;
                let data = x.data.chunks_exact(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
                let cache = keep.then(|| Cache::GlobalAvgPool { in_shape: [x.n, x.c, x.h, x.w] });
                (Tensor::from_rows(x.n, x.c, data), cache)
            }
            Layer::Linear { in_f, out_f, weight, bias } => {
                assert_eq!(x.sample_len(), in_f, "linear input width");
                let mut y = vec![0.0; x.n * out_f];
                for row in y.chunks_exact_mut(out_f) {
                    row.copy_from_slice(&params[bias..bias + out_f]);
                }
                // y = x W^T
                gemm(
                    x.n,
                    in_f,
                    out_f,
                    &x.data,
                    (in_f as isize, 1),
                    &params[weight..weight + out_f * in_f],
                    (1, in_f as isize),
                    1.0,
                    &mut y,
                );
                let cache = keep.then(|| Cache::Linear { input: x.data });
                (Tensor::from_rows(x.n, out_f, y), cache)
            }
            Layer::Residual { ref body, ref shortcut } => {
                let (main, body_caches) = run_layers(body, params, buffers, mode, x.clone(), keep);
                let (side, short_caches) = run_layers(shortcut, params, buffers, mode, x, keep);
                let mut y = main;
                y.data.iter_mut().zip(&side.data).for_each(|(a, b)| *a += b);
                let mask: Vec<bool> = y.data.iter().map(|&v| v > 0.0).collect();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                let cache = keep.then(|| Cache::Residual { body: body_caches, shortcut: short_caches, mask });
                (y, cache)
            }
        }
    }

    fn backward(&self, params: &[f64], cache: Cache, gy: Tensor, grads: &mut [f64]) -> Tensor {
        match (self, cache) {
            (&Layer::Conv { in_c, out_c, k, stride, pad, weight, bias }, Cache::Conv { cols, in_shape, out_hw }) => {
                let [n, c, h, w] = in_shape;
                let plane = out_hw.0 * out_hw.1;
                let ck2 = in_c * k * k;
                let wt = &params[weight..weight + out_c * ck2];
                let mut dx = Tensor::zeros(n, c, h, w);
                let mut dw = vec![0.0; out_c * ck2];
                let mut dcols = vec![0.0; ck2 * plane];
                for s in 0..n {
                    let gys = &gy.data[s * out_c * plane..(s + 1) * out_c * plane];
                    let cs = &cols[s * ck2 * plane..(s + 1) * ck2 * plane];
                    // dW += gy_s * cols_s^T
                    gemm(out_c, plane, ck2, gys, (plane as isize, 1), cs, (1, plane as isize), 1.0, &mut dw);
                    if let Some(b) = bias {
                        for (o, row) in gys.chunks_exact(plane).enumerate() {
                            grads[b + o] += row.iter().sum::<f64>();
                        }
                    }
                    // dcols = W^T * gy_s
                    gemm(ck2, out_c, plane, wt, (1, ck2 as isize), gys, (plane as isize, 1), 0.0, &mut dcols);
                    let len = c * h * w;
                    col2im(&dcols, [c, h, w], k, stride, pad, out_hw, &mut dx.data[s * len..(s + 1) * len]);
                }
                grads[weight..weight + out_c * ck2].iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
                dx
            }
            (&Layer::BatchNorm { c, gamma, beta, .. }, Cache::BatchNorm { xhat, inv_std, train }) => {
                let plane = gy.h * gy.w;
                let n = gy.n;
                let m = (n * plane) as f64;
                let mut dx = gy.clone();
                for ch in 0..c {
                    let g = params[gamma + ch];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy += gy.data[i];
                            sum_dy_xhat += gy.data[i] * xhat[i];
                        }
                    }
                    grads[gamma + ch] += sum_dy_xhat;
                    grads[beta + ch] += sum_dy;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            dx.data[i] = if train {
                                g * inv_std[ch] / m * (m * gy.data[i] - sum_dy - xhat[i] * sum_dy_xhat)
                            } else {
                                g * inv_std[ch] * gy.data[i]
                            };
                        }
                    }
                }
                dx
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut dx = gy;
                dx.data.iter_mut().zip(&mask).for_each(|(g, &m)| {
                    if !m {
                        *g = 0.0
                    }
                });
                dx
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let [n, c, h, w] = in_shape;
                let mut dx = Tensor::zeros(n, c, h, w);
                for (o, &j) in argmax.iter().enumerate() {
                    dx.data[j] += gy.data[o];
                }
                dx
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let [n, c, h, w] = in_shape;
                let plane = h * w;
                let mut dx = Tensor::zeros(n, c, h, w);
                for (chunk, &g) in dx.data.chunks_exact_mut(plane).zip(&gy.data) {
                    chunk.fill(g / plane as f64);
                }
                dx
            }
            (&Layer::Linear { in_f, out_f, weight, bias }, Cache::Linear { input }) => {
                let n = gy.n;
                for row in gy.data.chunks_exact(out_f) {
                    grads[bias..bias + out_f].iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
                // dW += gy^T x
                gemm(
                    out_f,
                    n,
                    in_f,
                    &gy.data,
                    (1, out_f as isize),
                    &input,
                    (in_f as isize, 1),
                    1.0,
                    &mut grads[weight..weight + out_f * in_f],
                );
                let mut dx = vec![0.0; n * in_f];
                gemm(
                    n,
                    out_f,
                    in_f,
                    &gy.data,
                    (out_f as isize, 1),
                    &params[weight..weight + out_f * in_f],
                    (in_f as isize, 1),
                    0.0,
                    &mut dx,
                );
                Tensor::from_rows(n, in_f, dx)
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc, mask }) => {
                let mut g = gy;
                g.data.iter_mut().zip(&mask).for_each(|(v, &m)| {
                    if !m {
                        *v = 0.0
                    }
                });
                let d_body = back_layers(body, params, bc, g.clone(), grads);
                let d_short = back_layers(shortcut, params, sc, g, grads);
                let mut dx = d_body;
                dx.data.iter_mut().zip(&d_short.data).for_each(|(a, b)| *a += b);
                dx
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

fn run_layers(layers: &[Layer], params: &[f64], buffers: &mut [f64], mode: Mode, x: Tensor, keep: bool) -> (Tensor, Vec<Cache>) {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    let mut h = x;
    for layer in layers {
        let (out, cache) = layer.forward(params, buffers, mode, h, keep);
        h = out;
        caches.extend(cache);
    }
    (h, caches)
}

fn back_layers(layers: &[Layer], params: &[f64], caches: Vec<Cache>, gy: Tensor, grads: &mut [f64]) -> Tensor {
    let mut g = gy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = layer.backward(params, cache, g, grads);
    }
    g
}

/// A sequential network with flat parameter and buffer storage.
#[derive(Clone, Debug)]
pub struct Network {
    pub(crate) layers: Vec<Layer>,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
    pub out_features: usize,
}

impl Network {
    /// Training-mode forward pass keeping activations for backward.
    /// Batch-norm layers use batch statistics and update running ones.
    pub fn forward(&mut self, x: Tensor) -> (Tensor, Trace) {
        let (y, caches) = run_layers(&self.layers, &self.params, &mut self.buffers, Mode::Train, x, true);
        (y, Trace { caches })
    }

    /// Forward pass without keeping activations. `Train` mode still updates
    /// running statistics.
    pub fn run(&mut self, x: Tensor, mode: Mode) -> Tensor {
        run_layers(&self.layers, &self.params, &mut self.buffers, mode, x, false).0
    }

    /// Inference with running statistics.
    pub fn infer(&self, x: Tensor) -> Tensor {
        let mut buffers = self.buffers.clone();
        run_layers(&self.layers, &self.params, &mut buffers, Mode::Eval, x, false).0
    }

    /// Eval-mode forward keeping activations, for gradient checks of the
    /// inference path.
    pub fn forward_eval(&self, x: Tensor) -> (Tensor, Trace) {
        let mut buffers = self.buffers.clone();
        let (y, caches) = run_layers(&self.layers, &self.params, &mut buffers, Mode::Eval, x, true);
        (y, Trace { caches })
    }

    /// Returns the gradient with respect to the input and the parameter gradient.
    pub fn backward(&self, trace: Trace, grad_out: Tensor) -> (Tensor, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let dx = back_layers(&self.layers, &self.params, trace.caches, grad_out, &mut grads);
        (dx, grads)
    }

    pub fn has_batch_norm(&self) -> bool {
        fn any(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::BatchNorm { .. } => true,
                Layer::Residual { body, shortcut } => any(body) || any(shortcut),
                _ => false,
            })
        }
        any(&self.layers)
    }
}

/// Allocates parameters with fan-in scaled uniform initialization.
pub(crate) struct NetBuilder<'r> {
    params: Vec<f64>,
    buffers: Vec<f64>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> NetBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        NetBuilder { params: Vec::new(), buffers: Vec::new(), rng }
    }

    fn uniform(&mut self, count: usize, bound: f64) -> usize {
        let off = self.params.len();
        for _ in 0..count {
            let v = self.rng.random_range(-bound..=bound);
            self.params.push(v);
        }
        off
    }

    fn constant(&mut self, count: usize, value: f64) -> usize {
        let off = self.params.len();
        self.params.resize(off + count, value);
        off
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Layer {
        let fan_in = (in_c * k * k) as f64;
        let weight = self.uniform(out_c * in_c * k * k, (6.0 / fan_in).sqrt());
        let bias = bias.then(|| self.uniform(out_c, 1.0 / fan_in.sqrt()));
        Layer::Conv { in_c, out_c, k, stride, pad, weight, bias }
    }

    pub fn batch_norm(&mut self, c: usize) -> Layer {
        let gamma = self.constant(c, 1.0);
        let beta = self.constant(c, 0.0);
        let running = self.buffers.len();
        self.buffers.extend(std::iter::repeat_n(0.0, c));
        self.buffers.extend(std::iter::repeat_n(1.0, c));
        Layer::BatchNorm { c, gamma, beta, running }
    }

    pub fn linear(&mut self, in_f: usize, out_f: usize, relu_follows: bool) -> Layer {
        let fan_in = in_f as f64;
        let bound = if relu_follows { (6.0 / fan_in).sqrt() } else { (3.0 / fan_in).sqrt() };
        let weight = self.uniform(out_f * in_f, bound);
        let bias = self.uniform(out_f, 1.0 / fan_in.sqrt());
        Layer::Linear { in_f, out_f, weight, bias }
    }

    pub fn finish(self, layers: Vec<Layer>, out_features: usize) -> Network {
        Network { layers, params: self.params, buffers: self.buffers, out_features }
    }
}
