use rand::Rng;

use crate::im2col::{col2im, im2col, ConvGeometry};
use crate::scalar::matmul;
use crate::spectral::SpectralNorm;
use crate::{Scalar, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

fn xavier<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect(),
    )
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in y.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(grad: &mut [T], dy: &[T]) {
    let c = grad.len();
    for row in dy.chunks(c) {
        for (g, &d) in grad.iter_mut().zip(row) {
            *g = *g + d;
        }
    }
}

/// Accumulates a weight gradient, mapping through spectral normalization.
fn accumulate_weight_grad<T: Scalar>(param: &mut Param<T>, sn: Option<&SpectralNorm<T>>, g: &[T]) {
    let grad = param.grad.data_mut();
    match sn {
        Some(sn) => sn.backprop(g, grad),
        None => {
            for (a, &b) in grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

/// 2-D convolution over NHWC input, weights `[out, k, k, in]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub spectral: Option<SpectralNorm<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = xavier(
            &[out_channels, kernel, kernel, in_channels],
            in_channels * kk,
            out_channels * kk,
            rng,
        );
        let spectral = spectral
            .then(|| SpectralNorm::new(weight.data(), out_channels, kk * in_channels, rng));
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            spectral,
        }
    }

    pub fn effective_weight(&self) -> &[T] {
        match &self.spectral {
            Some(sn) => sn.normalized(),
            None => self.weight.value.data(),
        }
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> ConvGeometry {
        ConvGeometry::new(in_h, in_w, self.in_channels, self.kernel, self.stride, self.pad)
            .unwrap_or_else(|| panic!("conv kernel {} does not fit {in_h}x{in_w}", self.kernel))
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>, ConvGeometry) {
        let [n, h, w, c] = x.dims4();
        assert_eq!(c, self.in_channels, "conv expects {} channels, got {c}", self.in_channels);
        let g = self.geometry(h, w);
        let cols = im2col(x.data(), n, &g);
        let rows = n * g.out_pixels();
        let mut y = vec![T::zero(); rows * self.out_channels];
        matmul(
            &cols,
            false,
            self.effective_weight(),
            true,
            &mut y,
            rows,
            g.patch_len(),
            self.out_channels,
            T::one(),
            T::zero(),
        );
        add_bias(&mut y, self.bias.value.data());
        (
            Tensor::from_vec(&[n, g.out_h, g.out_w, self.out_channels], y),
            cols,
            g,
        )
    }

    pub fn backward(
        &mut self,
        cols: &[T],
        g: &ConvGeometry,
        dy: &Tensor<T>,
        params: bool,
        input: bool,
    ) -> Option<Tensor<T>> {
        let n = dy.batch();
        let rows = n * g.out_pixels();
        let plen = g.patch_len();
        if params {
            let mut dw = vec![T::zero(); self.out_channels * plen];
            matmul(dy.data(), true, cols, false, &mut dw, self.out_channels, rows, plen, T::one(), T::zero());
            accumulate_weight_grad(&mut self.weight, self.spectral.as_ref(), &dw);
            accumulate_bias_grad(self.bias.grad.data_mut(), dy.data());
        }
        input.then(|| {
            let mut dcols = vec![T::zero(); rows * plen];
            matmul(
                dy.data(),
                false,
                self.effective_weight(),
                false,
                &mut dcols,
                rows,
                self.out_channels,
                plen,
                T::one(),
                T::zero(),
            );
            Tensor::from_vec(&[n, g.in_h, g.in_w, g.channels], col2im(&dcols, n, g))
        })
    }
}

/// Transposed convolution over NHWC input, weights `[in, k, k, out]`.
///
/// Output side is `(in - 1) * stride - 2 * pad + kernel`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = xavier(
            &[in_channels, kernel, kernel, out_channels],
            in_channels * kk,
            out_channels * kk,
            rng,
        );
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Geometry of the adjoint convolution mapping the output back to the input.
    pub fn geometry(&self, in_h: usize, in_w: usize) -> ConvGeometry {
        let side = |s: usize| ((s - 1) * self.stride + self.kernel).checked_sub(2 * self.pad);
        let (Some(oh), Some(ow)) = (side(in_h), side(in_w)) else {
            panic!("transposed conv padding too large for {in_h}x{in_w}");
        };
        let g = ConvGeometry::new(oh, ow, self.out_channels, self.kernel, self.stride, self.pad)
            .expect("transposed conv geometry");
        debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
        g
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvGeometry) {
        let [n, h, w, c] = x.dims4();
        assert_eq!(c, self.in_channels, "transposed conv expects {} channels, got {c}", self.in_channels);
        let g = self.geometry(h, w);
        let rows = n * h * w;
        let plen = g.patch_len();
        let mut cols = vec![T::zero(); rows * plen];
        matmul(x.data(), false, self.weight.value.data(), false, &mut cols, rows, c, plen, T::one(), T::zero());
        let mut y = col2im(&cols, n, &g);
        add_bias(&mut y, self.bias.value.data());
        (Tensor::from_vec(&[n, g.in_h, g.in_w, self.out_channels], y), g)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        g: &ConvGeometry,
        dy: &Tensor<T>,
        params: bool,
        input: bool,
    ) -> Option<Tensor<T>> {
        let n = dy.batch();
        let rows = n * g.out_pixels();
        let plen = g.patch_len();
        let dcols = im2col(dy.data(), n, g);
        if params {
            let mut dw = vec![T::zero(); self.in_channels * plen];
            matmul(x.data(), true, &dcols, false, &mut dw, self.in_channels, rows, plen, T::one(), T::zero());
            accumulate_weight_grad(&mut self.weight, None, &dw);
            accumulate_bias_grad(self.bias.grad.data_mut(), dy.data());
        }
        input.then(|| {
            let mut dx = vec![T::zero(); rows * self.in_channels];
            matmul(
                &dcols,
                false,
                self.weight.value.data(),
                true,
                &mut dx,
                rows,
                plen,
                self.in_channels,
                T::one(),
                T::zero(),
            );
            Tensor::from_vec(&[n, g.out_h, g.out_w, self.in_channels], dx)
        })
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    pub spectral: Option<SpectralNorm<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, spectral: bool, rng: &mut impl Rng) -> Self {
        let weight = xavier(&[out_features, in_features], in_features, out_features, rng);
        let spectral = spectral.then(|| SpectralNorm::new(weight.data(), out_features, in_features, rng));
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_features])),
            in_features,
            out_features,
            spectral,
        }
    }

    pub fn effective_weight(&self) -> &[T] {
        match &self.spectral {
            Some(sn) => sn.normalized(),
            None => self.weight.value.data(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.row_len(), self.in_features, "linear expects {} features", self.in_features);
        let mut y = vec![T::zero(); n * self.out_features];
        matmul(
            x.data(),
            false,
            self.effective_weight(),
            true,
            &mut y,
            n,
            self.in_features,
            self.out_features,
            T::one(),
            T::zero(),
        );
        add_bias(&mut y, self.bias.value.data());
        Tensor::from_vec(&[n, self.out_features], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, params: bool, input: bool) -> Option<Tensor<T>> {
        let n = dy.batch();
        if params {
            let mut dw = vec![T::zero(); self.out_features * self.in_features];
            matmul(
                dy.data(),
                true,
                x.data(),
                false,
                &mut dw,
                self.out_features,
                n,
                self.in_features,
                T::one(),
                T::zero(),
            );
            accumulate_weight_grad(&mut self.weight, self.spectral.as_ref(), &dw);
            accumulate_bias_grad(self.bias.grad.data_mut(), dy.data());
        }
        input.then(|| {
            let mut dx = vec![T::zero(); n * self.in_features];
            matmul(
                dy.data(),
                false,
                self.effective_weight(),
                false,
                &mut dx,
                n,
                self.out_features,
                self.in_features,
                T::one(),
                T::zero(),
            );
            Tensor::from_vec(x.shape(), dx)
        })
    }
}

/// Batch normalization over the last axis.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Without an affine part `gamma` and `beta` stay at 1 and 0 and are
    /// not trained.
    pub affine: bool,
}

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            affine: true,
        }
    }

    /// Standardization only, with no trainable scale or shift.
    pub fn plain(channels: usize) -> Self {
        Self {
            affine: false,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `batch_stats` selects training-mode statistics and updates the running
    /// estimates; otherwise the running estimates are used unchanged.
    pub fn forward(&mut self, x: &Tensor<T>, batch_stats: bool) -> (Tensor<T>, BatchNormCache<T>) {
        let c = self.channels();
        assert_eq!(*x.shape().last().unwrap(), c, "batch norm expects {c} channels");
        let rows = x.len() / c;
        let eps = T::from_f64_lossy(self.eps);
        let (mean, var) = if batch_stats {
            assert!(rows > 0, "batch norm on an empty batch");
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            let inv_rows = T::one() / T::from_usize(rows).unwrap();
            mean.iter_mut().for_each(|m| *m = *m * inv_rows);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s = *s + (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s * inv_rows);
            let mom = T::from_f64_lossy(self.momentum);
            let unbias = if rows > 1 {
                T::from_usize(rows).unwrap() / T::from_usize(rows - 1).unwrap()
            } else {
                T::one()
            };
            for i in 0..c {
                self.running_mean[i] = (T::one() - mom) * self.running_mean[i] + mom * mean[i];
                self.running_var[i] = (T::one() - mom) * self.running_var[i] + mom * var[i] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Evaluation-mode forward without touching the running estimates.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::from_f64_lossy(self.eps);
        let inv_std: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, &self.running_mean, &inv_std).0
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let c = self.channels();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            for i in 0..c {
                let h = (row[i] - mean[i]) * inv_std[i];
                xhat.push(h);
                y.push(gamma[i] * h + beta[i]);
            }
        }
        (Tensor::from_vec(x.shape(), y), xhat)
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>, params: bool) -> Tensor<T> {
        let c = self.channels();
        let rows = dy.len() / c;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (drow, hrow) in dy.data().chunks(c).zip(cache.xhat.chunks(c)) {
            for i in 0..c {
                sum_dy[i] = sum_dy[i] + drow[i];
                sum_dy_xhat[i] = sum_dy_xhat[i] + drow[i] * hrow[i];
            }
        }
        if params && self.affine {
            for i in 0..c {
                self.gamma.grad.data_mut()[i] = self.gamma.grad.data()[i] + sum_dy_xhat[i];
                self.beta.grad.data_mut()[i] = self.beta.grad.data()[i] + sum_dy[i];
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = Vec::with_capacity(dy.len());
        if cache.batch_stats {
            let inv_rows = T::one() / T::from_usize(rows).unwrap();
            for (drow, hrow) in dy.data().chunks(c).zip(cache.xhat.chunks(c)) {
                for i in 0..c {
                    let v = gamma[i]
                        * cache.inv_std[i]
                        * (drow[i] - sum_dy[i] * inv_rows - hrow[i] * sum_dy_xhat[i] * inv_rows);
                    dx.push(v);
                }
            }
        } else {
            for drow in dy.data().chunks(c) {
                for i in 0..c {
                    dx.push(drow[i] * gamma[i] * cache.inv_std[i]);
                }
            }
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(slope);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    /// `input` is the pre-activation, `output` the activation value.
    pub fn backward<T: Scalar>(&self, input: &Tensor<T>, output: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::Relu => input.zip_map(dy, |x, d| if x > T::zero() { d } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(slope);
                input.zip_map(dy, |x, d| if x > T::zero() { d } else { d * s })
            }
            Activation::Tanh => output.zip_map(dy, |y, d| d * (T::one() - y * y)),
        }
    }
}

/// Spatial sum over NHWC: `[n, h, w, c] -> [n, c]`.
pub fn sum_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.dims4();
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let o = &mut out[b * c..(b + 1) * c];
        for px in x.data()[b * h * w * c..(b + 1) * h * w * c].chunks(c) {
            for (a, &v) in o.iter_mut().zip(px) {
                *a = *a + v;
            }
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn sum_pool_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        let g = dy.row(b);
        for _ in 0..h * w {
            dx.extend_from_slice(g);
        }
    }
    Tensor::from_vec(in_shape, dx)
}

/// 2x2 average pooling with stride 2 (even sides only).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sides, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((b * oh + y) * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + x.data()[s + ch] * quarter;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out)
}

pub fn avg_pool2_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    upsample2(dy).scale(T::from_f64_lossy(0.25)).reshape(in_shape)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((b * h + y / 2) * w + xx / 2) * c;
                let o = ((b * oh + y) * ow + xx) * c;
                out[o..o + c].copy_from_slice(&x.data()[s..s + c]);
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out)
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, oh, ow, c] = dy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((b * h + y / 2) * w + xx / 2) * c;
                let s = ((b * oh + y) * ow + xx) * c;
                for ch in 0..c {
                    dx[o + ch] = dx[o + ch] + dy.data()[s + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], dx)
}
