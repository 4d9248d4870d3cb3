//! Layer primitives with hand-written backward passes.
//!
//! Forward passes take `&self` and hand back whatever the backward pass needs.
//! Batch-norm running statistics are only written by the owning network, so a
//! network can be shared read-only across per-class workers.

use rand::Rng;

use crate::tensor::{matmul, Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// How normalization layers with running statistics behave during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics are used and reported back in the cache.
    Train,
    /// Stored running statistics are used as constants.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    #[serde(alias = "leaky_relu")]
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub slot: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        slot: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: fan_in_uniform(rng, out_channels * fan_in, fan_in),
            bias: vec![T::zero(); out_channels],
            slot,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = (h + 2 * self.padding).checked_sub(self.kernel)? + 1;
        let wo = (w + 2 * self.padding).checked_sub(self.kernel)? + 1;
        Some((ho, wo))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
    fn im2col(&self, img: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let k = self.kernel;
        let p = self.padding as isize;
        let hw_out = ho * wo;
        for c in 0..self.in_channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    let dx = kx as isize - p;
                    // valid ox range: 0 <= ox + dx < w
                    let ox_lo = (-dx).clamp(0, wo as isize) as usize;
                    let ox_hi = (w as isize - dx).clamp(0, wo as isize) as usize;
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        line[..ox_lo].fill(T::zero());
                        let start = (ox_lo as isize + dx) as usize;
                        line[ox_lo..ox_hi].copy_from_slice(&src[start..start + (ox_hi - ox_lo)]);
                        line[ox_hi..].fill(T::zero());
                    }
                }
            }
        }
    }

    /// Folds `[C*k*k, Ho*Wo]` back into an image gradient, accumulating.
    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, img: &mut [T]) {
        let k = self.kernel;
        let p = self.padding as isize;
        let hw_out = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    let dx = kx as isize - p;
                    let ox_lo = (-dx).clamp(0, wo as isize) as usize;
                    let ox_hi = (w as isize - dx).clamp(0, wo as isize) as usize;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let start = (ox_lo as isize + dx) as usize;
                        let dst = &mut plane[iy as usize * w + start..iy as usize * w + start + (ox_hi - ox_lo)];
                        for (d, s) in dst.iter_mut().zip(&src[oy * wo + ox_lo..oy * wo + ox_hi]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4().expect("conv input is 4-d");
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.output_hw(h, w).expect("validated at build time");
        let hw_out = ho * wo;
        let plen = self.patch_len();
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut cols = vec![T::zero(); plen * hw_out];
        let out_len = self.out_channels * hw_out;
        for i in 0..n {
            let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
            for (oc, b) in self.bias.iter().enumerate() {
                dst[oc * hw_out..(oc + 1) * hw_out].fill(*b);
            }
            if self.kernel == 1 && self.padding == 0 {
                matmul(self.out_channels, plen, hw_out, &self.weight, false, x.item(i), false, dst, true);
            } else {
                self.im2col(x.item(i), h, w, ho, wo, &mut cols);
                matmul(self.out_channels, plen, hw_out, &self.weight, false, &cols, false, dst, true);
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (n, _, h, w) = input.dims4().expect("conv input is 4-d");
        let (_, _, ho, wo) = grad.dims4().expect("conv grad is 4-d");
        let hw_out = ho * wo;
        let plen = self.patch_len();
        let direct = self.kernel == 1 && self.padding == 0;
        let mut cols = vec![T::zero(); plen * hw_out];
        let mut dcols = vec![T::zero(); plen * hw_out];
        let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));

        if let Some(grads) = grads {
            let (gw, rest) = grads[self.slot..].split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut rest[0];
            for i in 0..n {
                let g = grad.item(i);
                let patches: &[T] = if direct {
                    input.item(i)
                } else {
                    self.im2col(input.item(i), h, w, ho, wo, &mut cols);
                    &cols
                };
                matmul(self.out_channels, hw_out, plen, g, false, patches, true, gw, true);
                for (oc, b) in gb.iter_mut().enumerate() {
                    *b += g[oc * hw_out..(oc + 1) * hw_out].iter().copied().sum::<T>();
                }
            }
        }

        if let Some(dx) = dx.as_mut() {
            for i in 0..n {
                let g = grad.item(i);
                if direct {
                    matmul(plen, self.out_channels, hw_out, &self.weight, true, g, false, dx.item_mut(i), true);
                } else {
                    matmul(plen, self.out_channels, hw_out, &self.weight, true, g, false, &mut dcols, false);
                    self.col2im(&dcols, h, w, ho, wo, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub slot: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize, slot: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: fan_in_uniform(rng, in_features * out_features, in_features),
            bias: vec![T::zero(); out_features],
            slot,
        }
    }

    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.batch();
        let mut out = Tensor::zeros(&[b, self.out_features]);
        for i in 0..b {
            out.item_mut(i).copy_from_slice(&self.bias);
        }
        matmul(b, self.in_features, self.out_features, x.data(), false, &self.weight, true, out.data_mut(), true);
        out
    }

    pub fn backward(&self, input: &Tensor<T>, grad: &Tensor<T>, grads: Option<&mut [Vec<T>]>) -> Tensor<T> {
        let b = input.batch();
        if let Some(grads) = grads {
            let (gw, rest) = grads[self.slot..].split_at_mut(1);
            matmul(self.out_features, b, self.in_features, grad.data(), true, input.data(), false, &mut gw[0], true);
            for i in 0..b {
                for (gb, g) in rest[0].iter_mut().zip(grad.item(i)) {
                    *gb += *g;
                }
            }
        }
        let mut dx = Tensor::zeros(&[b, self.in_features]);
        matmul(b, self.out_features, self.in_features, grad.data(), false, &self.weight, false, dx.data_mut(), false);
        dx
    }
}

/// Group normalisation with per-channel affine parameters. Instance norm is
/// `groups == channels`, layer norm is `groups == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub slot: usize,
}

/// Shared normalisation backward over independent groups of `m` values:
/// `dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
fn normalized_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: T, dx: &mut [T]) {
    let m = T::from_usize(dxhat.len()).unwrap();
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dxhat.iter().zip(xhat).map(|(d, x)| *d * *x).sum();
    for ((o, d), x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv_std / m * (m * *d - sum_d - *x * sum_dx);
    }
}

impl<T: Real> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize, slot: usize) -> Self {
        Self {
            groups,
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            slot,
        }
    }

    /// Returns output, normalized values and per-(sample, group) inverse std.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let (n, c, h, w) = x.dims4().expect("norm input is 4-d");
        let hw = h * w;
        let cpg = c / self.groups;
        let glen = cpg * hw;
        let eps = T::lit(NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_stds = Vec::with_capacity(n * self.groups);
        let inv_m = T::one() / T::from_usize(glen).unwrap();
        for (gi, chunk) in x.data().chunks(glen).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() * inv_m;
            let var = chunk.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_m;
            let inv_std = T::one() / (var + eps).sqrt();
            for (o, v) in xhat[gi * glen..(gi + 1) * glen].iter_mut().zip(chunk) {
                *o = (*v - mean) * inv_std;
            }
            inv_stds.push(inv_std);
        }
        let mut out = Tensor::zeros(x.shape());
        for (ci, (o, xh)) in out.data_mut().chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = ci % c;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            for (o, v) in o.iter_mut().zip(xh) {
                *o = g * *v + b;
            }
        }
        (out, xhat, inv_stds)
    }

    pub fn backward(&self, xhat: &[T], inv_stds: &[T], grad: &Tensor<T>, grads: Option<&mut [Vec<T>]>) -> Tensor<T> {
        let (_, c, h, w) = grad.dims4().expect("norm grad is 4-d");
        let hw = h * w;
        let glen = c / self.groups * hw;
        if let Some(grads) = grads {
            let (gg, rest) = grads[self.slot..].split_at_mut(1);
            for (ci, (g, xh)) in grad.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let ch = ci % c;
                gg[0][ch] += g.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
                rest[0][ch] += g.iter().copied().sum::<T>();
            }
        }
        let mut dxhat = grad.data().to_vec();
        for (ci, d) in dxhat.chunks_mut(hw).enumerate() {
            let gamma = self.gamma[ci % c];
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        let mut dx = Tensor::zeros(grad.shape());
        for (gi, ((o, d), xh)) in dx
            .data_mut()
            .chunks_mut(glen)
            .zip(dxhat.chunks(glen))
            .zip(xhat.chunks(glen))
            .enumerate()
        {
            normalized_backward(d, xh, inv_stds[gi], o);
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub slot: usize,
}

/// Per-channel statistics observed in a train-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalisation).
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, slot: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            slot,
        }
    }

    pub fn batch_stats(x: &Tensor<T>) -> BatchStats<T> {
        let (n, c, h, w) = x.dims4().expect("bn input is 4-d");
        let hw = h * w;
        let count = n * hw;
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        for (ci, plane) in x.data().chunks(hw).enumerate() {
            mean[ci % c] += plane.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![T::zero(); c];
        for (ci, plane) in x.data().chunks(hw).enumerate() {
            let m = mean[ci % c];
            var[ci % c] += plane.iter().map(|v| (*v - m) * (*v - m)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v *= inv);
        BatchStats { mean, var, count }
    }

    /// Normalises with the given statistics. Returns output, xhat, per-channel inverse std.
    pub fn forward_with(&self, x: &Tensor<T>, mean: &[T], var: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let (_, c, h, w) = x.dims4().expect("bn input is 4-d");
        let hw = h * w;
        let eps = T::lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(x.shape());
        for (ci, ((o, xh), src)) in out
            .data_mut()
            .chunks_mut(hw)
            .zip(xhat.chunks_mut(hw))
            .zip(x.data().chunks(hw))
            .enumerate()
        {
            let ch = ci % c;
            for ((o, xh), v) in o.iter_mut().zip(xh.iter_mut()).zip(src) {
                *xh = (*v - mean[ch]) * inv_std[ch];
                *o = self.gamma[ch] * *xh + self.beta[ch];
            }
        }
        (out, xhat, inv_std)
    }

    pub fn backward(
        &self,
        xhat: &[T],
        inv_std: &[T],
        batch_mode: bool,
        grad: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
    ) -> Tensor<T> {
        let (n, c, h, w) = grad.dims4().expect("bn grad is 4-d");
        let hw = h * w;
        if let Some(grads) = grads {
            let (gg, rest) = grads[self.slot..].split_at_mut(1);
            for (ci, (g, xh)) in grad.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let ch = ci % c;
                gg[0][ch] += g.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
                rest[0][ch] += g.iter().copied().sum::<T>();
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        if !batch_mode {
            for (ci, (o, g)) in dx.data_mut().chunks_mut(hw).zip(grad.data().chunks(hw)).enumerate() {
                let s = self.gamma[ci % c] * inv_std[ci % c];
                for (o, g) in o.iter_mut().zip(g) {
                    *o = *g * s;
                }
            }
            return dx;
        }
        // gather each channel across the batch, reuse the shared group formula
        let m = n * hw;
        let mut d_ch = vec![T::zero(); m];
        let mut x_ch = vec![T::zero(); m];
        let mut o_ch = vec![T::zero(); m];
        for ch in 0..c {
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in 0..hw {
                    d_ch[i * hw + j] = grad.data()[off + j] * self.gamma[ch];
                    x_ch[i * hw + j] = xhat[off + j];
                }
            }
            normalized_backward(&d_ch, &x_ch, inv_std[ch], &mut o_ch);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                dx.data_mut()[off..off + hw].copy_from_slice(&o_ch[i * hw..(i + 1) * hw]);
            }
        }
        dx
    }
}

pub fn activate<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        Activation::LeakyRelu => x.map(|v| if v > T::zero() { v } else { v * slope }),
    }
}

/// Backward of an activation from its output alone: for relu and leaky relu
/// the output is positive exactly where the input is.
pub fn activate_backward<T: Real>(kind: Activation, output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    let mut dx = grad.clone();
    match kind {
        Activation::Relu => {
            for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                if *y <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                *d *= *y * (T::one() - *y);
            }
        }
        Activation::LeakyRelu => {
            for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                if *y <= T::zero() {
                    *d *= slope;
                }
            }
        }
    }
    dx
}

/// 2x2, stride-2 pooling (floor on odd sizes). For max pooling the argmax
/// offsets are returned for the backward pass.
pub fn pool2<T: Real>(kind: PoolKind, x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4().expect("pool input is 4-d");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = if kind == PoolKind::Max { vec![0u32; n * c * ho * wo] } else { Vec::new() };
    let quarter = T::lit(0.25);
    for (pi, (src, dst)) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let idx = [base, base + 1, base + w, base + w + 1];
                let o = oy * wo + ox;
                match kind {
                    PoolKind::Avg => {
                        dst[o] = (src[idx[0]] + src[idx[1]] + src[idx[2]] + src[idx[3]]) * quarter;
                    }
                    PoolKind::Max => {
                        let mut best = idx[0];
                        for &j in &idx[1..] {
                            if src[j] > src[best] {
                                best = j;
                            }
                        }
                        dst[o] = src[best];
                        argmax[pi * ho * wo + o] = best as u32;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool2_backward<T: Real>(kind: PoolKind, input_shape: &[usize], argmax: &[u32], grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = grad.dims4().expect("pool grad is 4-d");
    let mut dx = Tensor::zeros(input_shape);
    let quarter = T::lit(0.25);
    for (pi, (dst, g)) in dx.data_mut().chunks_mut(h * w).zip(grad.data().chunks(ho * wo)).enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                match kind {
                    PoolKind::Avg => {
                        let base = 2 * oy * w + 2 * ox;
                        let v = g[o] * quarter;
                        for j in [base, base + 1, base + w, base + w + 1] {
                            dst[j] += v;
                        }
                    }
                    PoolKind::Max => dst[argmax[pi * ho * wo + o] as usize] += g[o],
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("pool input is 4-d");
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c, 1, 1], data).expect("consistent shape")
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    for (dst, g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
        dst.fill(*g * inv);
    }
    dx
}
