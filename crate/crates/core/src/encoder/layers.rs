//! Layer kernels with hand-written reverse passes.
//!
//! Convolutional activations use a channel-major `C x N x H x W` layout so that
//! a whole batch convolves as one matrix product and batch normalization reads
//! each channel as a contiguous slice.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// How the optimizer should treat a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Biases and normalization parameters skip weight decay and trust scaling.
    pub fn is_excluded_from_adaptation(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn filled(name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            kind,
            shape,
            value: vec![v; n],
        }
    }

    fn uniform(name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::cast(rng.gen_range(-bound..=bound))).collect();
        Self {
            name: name.into(),
            kind,
            shape,
            value,
        }
    }
}

/// Batch of feature maps in `C x N x H x W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    /// Per-channel stride (`N * H * W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Image `b` as an `H x W x C` channel-last buffer.
    pub fn image_hwc(&self, b: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.h * self.w * self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.c {
                    out.push(self.data[self.idx(c, b, y, x)]);
                }
            }
        }
        out
    }
}

/// 3x3, padding 1, no bias (always followed by batch normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

pub const KSIZE: usize = 3;

pub fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * KSIZE * KSIZE;
        Self {
            weight: Param::uniform(format!("{name}.weight"), ParamKind::Weight, vec![out_c, in_c, KSIZE, KSIZE], (6.0 / fan_in as f64).sqrt(), rng),
            in_c,
            out_c,
            stride,
        }
    }

    /// Output columns `[lo, hi)` whose tap `k` lands inside an input row of length `len`,
    /// and the input index of column `lo`.
    fn valid_span(&self, k: usize, len: usize, out: usize) -> (usize, usize, usize) {
        let s = self.stride;
        // input index = o * s + k - 1
        let lo = if k == 0 { 1usize.div_ceil(s) } else { 0 };
        let hi = ((len + 1 - k).div_ceil(s)).min(out);
        (lo, hi.max(lo), (lo * s + k).saturating_sub(1))
    }

    pub fn im2col(&self, x: &Act<T>) -> (Vec<T>, usize, usize) {
        let (ho, wo) = (conv_out(x.h, self.stride), conv_out(x.w, self.stride));
        let cols_n = x.n * ho * wo;
        let s = self.stride;
        let mut cols = vec![T::zero(); x.c * 9 * cols_n];
        for c in 0..x.c {
            for ky in 0..KSIZE {
                let (y_lo, y_hi, iy0) = self.valid_span(ky, x.h, ho);
                for kx in 0..KSIZE {
                    let (x_lo, x_hi, ix0) = self.valid_span(kx, x.w, wo);
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * cols_n..][..cols_n];
                    for n in 0..x.n {
                        for (oy, iy) in (y_lo..y_hi).zip((iy0..).step_by(s)) {
                            let src = &x.data[x.idx(c, n, iy, 0)..][..x.w];
                            let dst = &mut row[(n * ho + oy) * wo..][x_lo..x_hi];
                            if s == 1 {
                                dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                            } else {
                                for (d, v) in dst.iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, dcols: &[T], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> Act<T> {
        let (c_in, n_img, h, w) = shape;
        let s = self.stride;
        let mut dx = Act::zeros(c_in, n_img, h, w);
        let cols_n = n_img * ho * wo;
        for c in 0..c_in {
            for ky in 0..KSIZE {
                let (y_lo, y_hi, iy0) = self.valid_span(ky, h, ho);
                for kx in 0..KSIZE {
                    let (x_lo, x_hi, ix0) = self.valid_span(kx, w, wo);
                    let row = &dcols[((c * 9) + ky * 3 + kx) * cols_n..][..cols_n];
                    for n in 0..n_img {
                        for (oy, iy) in (y_lo..y_hi).zip((iy0..).step_by(s)) {
                            let base = dx.idx(c, n, iy, 0);
                            let src = &row[(n * ho + oy) * wo..][x_lo..x_hi];
                            let dst = &mut dx.data[base + ix0..base + w];
                            for (d, g) in dst.iter_mut().step_by(s).zip(src) {
                                *d += *g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by the reverse pass.
    pub fn forward(&self, x: &Act<T>) -> (Act<T>, Vec<T>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (cols, ho, wo) = self.im2col(x);
        let cols_n = x.n * ho * wo;
        let k = self.in_c * 9;
        let mut y = Act::zeros(self.out_c, x.n, ho, wo);
        T::gemm(self.out_c, k, cols_n, T::one(), &self.weight.value, k as isize, 1, &cols, cols_n as isize, 1, T::zero(), &mut y.data, cols_n as isize, 1);
        (y, cols)
    }

    /// Accumulates the weight gradient into `dw`; returns the input gradient when asked.
    pub fn backward(&self, cols: &[T], dy: &Act<T>, in_shape: (usize, usize, usize, usize), dw: &mut [T], need_dx: bool) -> Option<Act<T>> {
        let cols_n = dy.plane();
        let k = self.in_c * 9;
        // dW = dY * cols^T
        T::gemm(self.out_c, cols_n, k, T::one(), &dy.data, cols_n as isize, 1, cols, 1, cols_n as isize, T::one(), dw, k as isize, 1);
        if !need_dx {
            return None;
        }
        // dcols = W^T * dY
        let mut dcols = vec![T::zero(); k * cols_n];
        T::gemm(k, self.out_c, cols_n, T::one(), &self.weight.value, 1, k as isize, &dy.data, cols_n as isize, 1, T::zero(), &mut dcols, cols_n as isize, 1);
        Some(self.col2im(&dcols, in_shape, dy.h, dy.w))
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch statistics of one normalization layer, kept so running averages can be
/// committed after the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: BnStats<T>,
}

/// Element `(channel, i)` lives at `channel * cs + i * is`.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub channels: usize,
    pub count: usize,
    pub cs: usize,
    pub is: usize,
}

impl Layout {
    pub fn channel_major(channels: usize, count: usize) -> Self {
        Self { channels, count, cs: count, is: 1 }
    }

    pub fn row_major(rows: usize, features: usize) -> Self {
        Self {
            channels: features,
            count: rows,
            cs: 1,
            is: features,
        }
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), ParamKind::NormScale, vec![channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), ParamKind::NormShift, vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes in place with running statistics.
    pub fn forward_eval(&self, x: &mut [T], l: Layout) {
        let eps = T::cast(BN_EPS);
        for c in 0..l.channels {
            let inv = T::one() / (self.running_var[c] + eps).sqrt();
            let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
            for i in 0..l.count {
                let v = &mut x[c * l.cs + i * l.is];
                *v = (*v - m) * inv * g + b;
            }
        }
    }

    /// Normalizes in place with batch statistics; returns what the reverse pass needs.
    pub fn forward_train(&self, x: &mut [T], l: Layout) -> BnCache<T> {
        let eps = T::cast(BN_EPS);
        let m = T::cast(l.count);
        let mut xhat = vec![T::zero(); x.len()];
        let mut mean = vec![T::zero(); l.channels];
        let mut var = vec![T::zero(); l.channels];
        let mut inv_std = vec![T::zero(); l.channels];
        for c in 0..l.channels {
            let mu = (0..l.count).map(|i| x[c * l.cs + i * l.is]).sum::<T>() / m;
            let v = (0..l.count).map(|i| (x[c * l.cs + i * l.is] - mu).powi(2)).sum::<T>() / m;
            let inv = T::one() / (v + eps).sqrt();
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..l.count {
                let o = c * l.cs + i * l.is;
                let xh = (x[o] - mu) * inv;
                xhat[o] = xh;
                x[o] = xh * g + b;
            }
            mean[c] = mu;
            var[c] = v;
            inv_std[c] = inv;
        }
        BnCache {
            xhat,
            inv_std,
            stats: BnStats { mean, var, count: l.count },
        }
    }

    /// Exponential running-average update with the (unbiased) batch variance.
    pub fn commit(&mut self, stats: &BnStats<T>) {
        let mom = T::cast(BN_MOMENTUM);
        let keep = T::one() - mom;
        let unbias = if stats.count > 1 {
            T::cast(stats.count) / T::cast(stats.count - 1)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + mom * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + mom * stats.var[c] * unbias;
        }
    }

    /// `dy` holds the output gradient and is overwritten with the input gradient.
    pub fn backward(&self, cache: &BnCache<T>, dy: &mut [T], l: Layout, dgamma: &mut [T], dbeta: &mut [T]) {
        let m = T::cast(l.count);
        for c in 0..l.channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..l.count {
                let o = c * l.cs + i * l.is;
                sum_dy += dy[o];
                sum_dy_xh += dy[o] * cache.xhat[o];
            }
            dgamma[c] += sum_dy_xh;
            dbeta[c] += sum_dy;
            let g = self.gamma.value[c];
            let scale = g * cache.inv_std[c] / m;
            for i in 0..l.count {
                let o = c * l.cs + i * l.is;
                dy[o] = scale * (m * dy[o] - sum_dy - cache.xhat[o] * sum_dy_xh);
            }
        }
    }
}

/// `y = x W^T + b` on row-major `[rows, in]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), ParamKind::Weight, vec![out, inp], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), ParamKind::Bias, vec![out], bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        let mut y: Vec<T> = (0..rows).flat_map(|_| self.bias.value.iter().copied()).collect();
        T::gemm(rows, inp, out, T::one(), x, inp as isize, 1, &self.weight.value, 1, inp as isize, T::one(), &mut y, out as isize, 1);
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], rows: usize, dw: &mut [T], db: &mut [T]) -> Vec<T> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        T::gemm(out, rows, inp, T::one(), dy, 1, out as isize, x, inp as isize, 1, T::one(), dw, inp as isize, 1);
        for r in 0..rows {
            for (d, g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
                *d += *g;
            }
        }
        let mut dx = vec![T::zero(); rows * inp];
        T::gemm(rows, out, inp, T::one(), dy, out as isize, 1, &self.weight.value, inp as isize, 1, T::zero(), &mut dx, inp as isize, 1);
        dx
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward output was clamped.
pub fn relu_backward<T: Scalar>(out: &[T], dy: &mut [T]) {
    for (g, o) in dy.iter_mut().zip(out) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}
