//! Differentiable Siamese augmentation.
//!
//! One [`AugmentationParams`] value is drawn per class per iteration and applied
//! unchanged to both the real and the synthetic batch of that class, so the two
//! sides see the same transform. Every op is linear (or affine) in the pixels,
//! which makes the backward pass exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Crop,
    Cutout,
    Flip,
    Scale,
    Rotate,
    ColorBrightness,
    ColorSaturation,
    ColorContrast,
    Noise,
    Identity,
}

impl AugKind {
    pub const ALL: [AugKind; 10] = [
        AugKind::Crop,
        AugKind::Cutout,
        AugKind::Flip,
        AugKind::Scale,
        AugKind::Rotate,
        AugKind::ColorBrightness,
        AugKind::ColorSaturation,
        AugKind::ColorContrast,
        AugKind::Noise,
        AugKind::Identity,
    ];

    pub fn is_color(self) -> bool {
        matches!(self, AugKind::ColorBrightness | AugKind::ColorSaturation | AugKind::ColorContrast)
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown augmentation {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Crop => "crop",
            AugKind::Cutout => "cutout",
            AugKind::Flip => "flip",
            AugKind::Scale => "scale",
            AugKind::Rotate => "rotate",
            AugKind::ColorBrightness => "color_brightness",
            AugKind::ColorSaturation => "color_saturation",
            AugKind::ColorContrast => "color_contrast",
            AugKind::Noise => "noise",
            AugKind::Identity => "identity",
        }
    }
}

/// Sampling ranges for every op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugRanges {
    /// Maximum shift as a fraction of the side, rounded up to whole pixels.
    pub crop_frac: f64,
    /// Cutout box side as a fraction of the image side.
    pub cutout_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotate_degrees: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub noise: f64,
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            crop_frac: 0.125,
            cutout_frac: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            rotate_degrees: 15.0,
            brightness: 1.0,
            saturation: 2.0,
            contrast: 0.5,
            noise: 0.001,
        }
    }
}

impl AugRanges {
    pub fn max_shift(&self, side: usize) -> usize {
        (side as f64 * self.crop_frac).ceil() as usize
    }

    pub fn cutout_side(&self, side: usize) -> usize {
        ((side as f64 * self.cutout_frac + 0.5) as usize).clamp(1, side)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("crop_frac", self.crop_frac),
            ("cutout_frac", self.cutout_frac),
            ("scale_min", self.scale_min),
            ("scale_max", self.scale_max),
            ("rotate_degrees", self.rotate_degrees),
            ("brightness", self.brightness),
            ("saturation", self.saturation),
            ("contrast", self.contrast),
            ("noise", self.noise),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("augmentation range {name} must be finite and non-negative")));
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return Err(Error::Config("augmentation scale range must satisfy 0 < min <= max".into()));
        }
        if self.cutout_frac > 1.0 {
            return Err(Error::Config("cutout_frac must be at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    Identity,
    /// Shift by whole pixels with zero fill: `out[y][x] = in[y - dy][x - dx]`.
    Crop { dy: i64, dx: i64 },
    /// Zero a `size`-sided box centred at `(cy, cx)`, clipped to the image.
    Cutout { cy: usize, cx: usize, size: usize },
    Flip { flip: bool },
    Scale { sx: f64, sy: f64 },
    Rotate { degrees: f64 },
    ColorBrightness { delta: f64 },
    ColorSaturation { factor: f64 },
    ColorContrast { factor: f64 },
    /// A fixed Gaussian field drawn from `seed`, scaled by `amplitude`.
    Noise { amplitude: f64, seed: u64 },
}

impl AugOp {
    pub fn kind(&self) -> AugKind {
        match self {
            AugOp::Identity => AugKind::Identity,
            AugOp::Crop { .. } => AugKind::Crop,
            AugOp::Cutout { .. } => AugKind::Cutout,
            AugOp::Flip { .. } => AugKind::Flip,
            AugOp::Scale { .. } => AugKind::Scale,
            AugOp::Rotate { .. } => AugKind::Rotate,
            AugOp::ColorBrightness { .. } => AugKind::ColorBrightness,
            AugOp::ColorSaturation { .. } => AugKind::ColorSaturation,
            AugOp::ColorContrast { .. } => AugKind::ColorContrast,
            AugOp::Noise { .. } => AugKind::Noise,
        }
    }
}

/// One sampled transform `omega`. Applying a list of them composes left to right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub ops: Vec<AugOp>,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self { ops: vec![AugOp::Identity] }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.iter().all(|o| *o == AugOp::Identity)
    }
}

/// The augmentation family `Omega`: which ops may be drawn and from what ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    pub strategies: Vec<AugKind>,
    #[serde(default)]
    pub ranges: AugRanges,
    /// Apply every listed op in sequence instead of one chosen uniformly.
    #[serde(default)]
    pub compose: bool,
}

impl AugConfig {
    /// Crop, cutout, flip, scale and rotate, plus the three colour ops on
    /// 3-channel data.
    pub fn default_for_channels(channels: usize) -> Self {
        let mut strategies = Vec::new();
        if channels == 3 {
            strategies.extend([AugKind::ColorBrightness, AugKind::ColorSaturation, AugKind::ColorContrast]);
        }
        strategies.extend([AugKind::Crop, AugKind::Cutout, AugKind::Flip, AugKind::Scale, AugKind::Rotate]);
        Self {
            strategies,
            ranges: AugRanges::default(),
            compose: false,
        }
    }

    pub fn identity() -> Self {
        Self {
            strategies: vec![AugKind::Identity],
            ranges: AugRanges::default(),
            compose: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.strategies.iter().all(|k| *k == AugKind::Identity)
    }

    /// Parses `"crop,cutout,flip"` style lists; `"none"` is the identity.
    pub fn from_list(list: &str, channels: usize) -> Result<Self> {
        match list.trim() {
            "default" => Ok(Self::default_for_channels(channels)),
            "none" | "identity" => Ok(Self::identity()),
            s => Ok(Self {
                strategies: s.split(',').map(|k| AugKind::parse(k.trim())).collect::<Result<_>>()?,
                ranges: AugRanges::default(),
                compose: false,
            }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, image_shape: [usize; 3], rng: &mut R) -> Result<AugmentationParams> {
        if self.compose {
            if self.strategies.is_empty() {
                return Err(Error::Config("augmentation strategy list is empty".into()));
            }
            let ops = self
                .strategies
                .iter()
                .map(|k| sample_op(*k, &self.ranges, image_shape, rng))
                .collect();
            Ok(AugmentationParams { ops })
        } else {
            sample_aug_params(&self.strategies, &self.ranges, image_shape, rng)
        }
    }
}

/// Draws the op kind uniformly from `strategies`, then its parameters.
pub fn sample_aug_params<R: Rng + ?Sized>(
    strategies: &[AugKind],
    ranges: &AugRanges,
    image_shape: [usize; 3],
    rng: &mut R,
) -> Result<AugmentationParams> {
    if strategies.is_empty() {
        return Err(Error::Config("augmentation strategy list is empty".into()));
    }
    let kind = strategies[rng.random_range(0..strategies.len())];
    Ok(AugmentationParams {
        ops: vec![sample_op(kind, ranges, image_shape, rng)],
    })
}

fn sample_op<R: Rng + ?Sized>(kind: AugKind, r: &AugRanges, [_, h, w]: [usize; 3], rng: &mut R) -> AugOp {
    let uniform = |rng: &mut R| rng.random::<f64>();
    match kind {
        AugKind::Identity => AugOp::Identity,
        AugKind::Crop => {
            let my = r.max_shift(h) as i64;
            let mx = r.max_shift(w) as i64;
            AugOp::Crop {
                dy: rng.random_range(-my..=my),
                dx: rng.random_range(-mx..=mx),
            }
        }
        AugKind::Cutout => AugOp::Cutout {
            cy: rng.random_range(0..h),
            cx: rng.random_range(0..w),
            size: r.cutout_side(h.min(w)),
        },
        AugKind::Flip => AugOp::Flip { flip: rng.random_bool(0.5) },
        AugKind::Scale => {
            let span = r.scale_max - r.scale_min;
            AugOp::Scale {
                sx: r.scale_min + span * uniform(rng),
                sy: r.scale_min + span * uniform(rng),
            }
        }
        AugKind::Rotate => AugOp::Rotate {
            degrees: (uniform(rng) - 0.5) * 2.0 * r.rotate_degrees,
        },
        AugKind::ColorBrightness => AugOp::ColorBrightness {
            delta: (uniform(rng) - 0.5) * r.brightness,
        },
        AugKind::ColorSaturation => AugOp::ColorSaturation {
            factor: uniform(rng) * r.saturation,
        },
        AugKind::ColorContrast => AugOp::ColorContrast {
            factor: uniform(rng) + r.contrast,
        },
        AugKind::Noise => AugOp::Noise {
            amplitude: r.noise,
            seed: rng.random(),
        },
    }
}

fn check_op(op: &AugOp, r: &AugRanges, [_, h, w]: [usize; 3]) -> Result<()> {
    let bad = |what: String| Err(Error::Validation(format!("augmentation parameter out of range: {what}")));
    let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo - 1e-12 && v <= hi + 1e-12;
    match *op {
        AugOp::Identity | AugOp::Flip { .. } => Ok(()),
        AugOp::Crop { dy, dx } => {
            if dy.unsigned_abs() as usize > r.max_shift(h) || dx.unsigned_abs() as usize > r.max_shift(w) {
                bad(format!("crop shift ({dy}, {dx})"))
            } else {
                Ok(())
            }
        }
        AugOp::Cutout { cy, cx, size } => {
            if cy >= h || cx >= w || size != r.cutout_side(h.min(w)) {
                bad(format!("cutout at ({cy}, {cx}) size {size}"))
            } else {
                Ok(())
            }
        }
        AugOp::Scale { sx, sy } => {
            if within(sx, r.scale_min, r.scale_max) && within(sy, r.scale_min, r.scale_max) {
                Ok(())
            } else {
                bad(format!("scale ({sx}, {sy})"))
            }
        }
        AugOp::Rotate { degrees } => {
            if within(degrees, -r.rotate_degrees, r.rotate_degrees) {
                Ok(())
            } else {
                bad(format!("rotation {degrees}"))
            }
        }
        AugOp::ColorBrightness { delta } => {
            if within(delta, -0.5 * r.brightness, 0.5 * r.brightness) {
                Ok(())
            } else {
                bad(format!("brightness {delta}"))
            }
        }
        AugOp::ColorSaturation { factor } => {
            if within(factor, 0.0, r.saturation) {
                Ok(())
            } else {
                bad(format!("saturation {factor}"))
            }
        }
        AugOp::ColorContrast { factor } => {
            if within(factor, r.contrast, 1.0 + r.contrast) {
                Ok(())
            } else {
                bad(format!("contrast {factor}"))
            }
        }
        AugOp::Noise { amplitude, .. } => {
            if within(amplitude, 0.0, r.noise) {
                Ok(())
            } else {
                bad(format!("noise amplitude {amplitude}"))
            }
        }
    }
}

/// Applies `params` to every image of `x`. The same map is used for each image.
pub fn apply_aug<T: Real>(params: &AugmentationParams, ranges: &AugRanges, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    for op in &params.ops {
        check_op(op, ranges, [c, h, w])?;
    }
    let mut y = x.clone();
    for op in &params.ops {
        y = forward_op(op, y);
    }
    Ok(y)
}

/// Pulls `d loss / d apply_aug(x)` back to `d loss / d x`. The maps are linear
/// in the pixels, so the input itself is not needed.
pub fn apply_aug_backward<T: Real>(params: &AugmentationParams, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.dims4()?;
    let mut g = grad.clone();
    for op in params.ops.iter().rev() {
        g = backward_op(op, g);
    }
    Ok(g)
}

/// Output pixel `p` reads `sum_k w_k * in[src_k]` within each channel plane.
struct PlaneMap<T> {
    taps: Vec<Vec<(u32, T)>>,
}

impl<T: Real> PlaneMap<T> {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let hw = self.taps.len();
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
            for (d, taps) in dst.iter_mut().zip(&self.taps) {
                let mut acc = T::zero();
                for &(s, wt) in taps {
                    acc += wt * src[s as usize];
                }
                *d = acc;
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Tensor<T>) -> Tensor<T> {
        let hw = self.taps.len();
        let mut out = Tensor::zeros(g.shape());
        for (gp, dst) in g.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
            for (gv, taps) in gp.iter().zip(&self.taps) {
                for &(s, wt) in taps {
                    dst[s as usize] += wt * *gv;
                }
            }
        }
        out
    }
}

fn shift_map<T: Real>(h: usize, w: usize, dy: i64, dx: i64) -> PlaneMap<T> {
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sy, sx) = (y - dy, x - dx);
            taps.push(if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                vec![((sy * w as i64 + sx) as u32, T::one())]
            } else {
                Vec::new()
            });
        }
    }
    PlaneMap { taps }
}

fn flip_map<T: Real>(h: usize, w: usize) -> PlaneMap<T> {
    let taps = (0..h)
        .flat_map(|y| (0..w).map(move |x| vec![((y * w + (w - 1 - x)) as u32, T::one())]))
        .collect();
    PlaneMap { taps }
}

/// Bilinear resampling with zero padding. `theta` maps normalised output
/// coordinates (corners at -1 and 1) to normalised input coordinates.
fn affine_map<T: Real>(h: usize, w: usize, theta: [[f64; 2]; 2]) -> PlaneMap<T> {
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let denorm = |u: f64, n: usize| if n > 1 { (u + 1.0) * (n - 1) as f64 / 2.0 } else { 0.0 };
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (norm(x, w), norm(y, h));
            let su = theta[0][0] * u + theta[0][1] * v;
            let sv = theta[1][0] * u + theta[1][1] * v;
            let (fx, fy) = (denorm(su, w), denorm(sv, h));
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let mut t = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - ay), (y0 + 1.0, ay)] {
                for (xx, wx) in [(x0, 1.0 - ax), (x0 + 1.0, ax)] {
                    let wt = wy * wx;
                    if wt != 0.0 && yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                        t.push(((yy as usize * w + xx as usize) as u32, T::lit(wt)));
                    }
                }
            }
            taps.push(t);
        }
    }
    PlaneMap { taps }
}

fn geometric_map<T: Real>(op: &AugOp, h: usize, w: usize) -> Option<PlaneMap<T>> {
    match *op {
        AugOp::Crop { dy, dx } => Some(shift_map(h, w, dy, dx)),
        AugOp::Flip { flip: true } => Some(flip_map(h, w)),
        AugOp::Scale { sx, sy } => Some(affine_map(h, w, [[sx, 0.0], [0.0, sy]])),
        AugOp::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            Some(affine_map(h, w, [[c, s], [-s, c]]))
        }
        _ => None,
    }
}

fn cutout_mask(cy: usize, cx: usize, size: usize, h: usize, w: usize) -> Vec<bool> {
    let lo = |c: usize| c as i64 - (size / 2) as i64;
    let (y0, x0) = (lo(cy), lo(cx));
    let (y1, x1) = (y0 + size as i64, x0 + size as i64);
    (0..h as i64)
        .flat_map(|y| (0..w as i64).map(move |x| y >= y0 && y < y1 && x >= x0 && x < x1))
        .collect()
}

fn noise_field(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `y = f * x + (1 - f) * mean`, the mean taken over channels at each pixel
/// or over the whole image. Self-adjoint, so it also serves as backward.
fn mix_with_mean<T: Real>(mut x: Tensor<T>, factor: f64, per_pixel: bool) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("checked 4-d");
    let hw = h * w;
    let f = T::lit(factor);
    let rest = T::one() - f;
    for i in 0..n {
        let img = x.item_mut(i);
        if per_pixel {
            let inv = T::one() / T::from_usize(c).unwrap();
            for p in 0..hw {
                let m = (0..c).map(|ch| img[ch * hw + p]).sum::<T>() * inv;
                for ch in 0..c {
                    let v = &mut img[ch * hw + p];
                    *v = f * *v + rest * m;
                }
            }
        } else {
            let m = img.iter().copied().sum::<T>() / T::from_usize(img.len()).unwrap();
            for v in img.iter_mut() {
                *v = f * *v + rest * m;
            }
        }
    }
    x
}

fn forward_op<T: Real>(op: &AugOp, mut x: Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = x.dims4().expect("checked 4-d");
    if let Some(map) = geometric_map::<T>(op, h, w) {
        return map.apply(&x);
    }
    match *op {
        AugOp::Cutout { cy, cx, size } => {
            let mask = cutout_mask(cy, cx, size, h, w);
            for plane in x.data_mut().chunks_mut(h * w) {
                for (v, m) in plane.iter_mut().zip(&mask) {
                    if *m {
                        *v = T::zero();
                    }
                }
            }
            x
        }
        AugOp::ColorBrightness { delta } => x.map(|v| v + T::lit(delta)),
        AugOp::ColorSaturation { factor } => mix_with_mean(x, factor, true),
        AugOp::ColorContrast { factor } => mix_with_mean(x, factor, false),
        AugOp::Noise { amplitude, seed } => {
            let field = noise_field(seed, c * h * w);
            let chw = field.len();
            for img in x.data_mut().chunks_mut(chw) {
                for (v, z) in img.iter_mut().zip(&field) {
                    *v += T::lit(amplitude * z);
                }
            }
            x
        }
        _ => x,
    }
}

fn backward_op<T: Real>(op: &AugOp, g: Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = g.dims4().expect("checked 4-d");
    if let Some(map) = geometric_map::<T>(op, h, w) {
        return map.apply_transpose(&g);
    }
    match *op {
        AugOp::Cutout { .. } => forward_op(op, g),
        AugOp::ColorSaturation { factor } => mix_with_mean(g, factor, true),
        AugOp::ColorContrast { factor } => mix_with_mean(g, factor, false),
        // additive ops pass the gradient through unchanged
        _ => g,
    }
}
