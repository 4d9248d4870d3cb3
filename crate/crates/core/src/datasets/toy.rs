use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledImageSet;
use crate::tensor::Tensor;

pub const TOY_CLASSES: usize = 4;
pub const TOY_SIDE: usize = 8;

const BLOB_SIGMA: f64 = 1.0;
const CENTER_JITTER: f64 = 0.5;
const AMPLITUDE: (f64, f64) = (0.8, 1.2);
const NOISE_SIGMA: f64 = 0.35;

/// Raw (unnormalised) toy images: class `c` is a Gaussian blob centred in
/// quadrant `c` (row-major: top-left, top-right, bottom-left, bottom-right)
/// with jittered centre and amplitude, plus i.i.d. Gaussian pixel noise.
/// Sample `i` has label `i % 4`.
pub fn toy_raw(seed: u64, per_class: usize) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let n = per_class * TOY_CLASSES;
    let side = TOY_SIDE;
    let q = side as f64 / 4.0;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % TOY_CLASSES;
        let cy = if c < 2 { q } else { 3.0 * q } - 0.5 + rng.random_range(-CENTER_JITTER..CENTER_JITTER);
        let cx = if c.is_multiple_of(2) { q } else { 3.0 * q } - 0.5 + rng.random_range(-CENTER_JITTER..CENTER_JITTER);
        let amp = rng.random_range(AMPLITUDE.0..AMPLITUDE.1);
        for y in 0..side {
            for x in 0..side {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = amp * (-r2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp() + noise.sample(&mut rng);
                data.push(v as f32);
            }
        }
        labels.push(c);
    }
    let t = Tensor::new(vec![n, 1, side, side], data).expect("consistent toy shape");
    (t, labels)
}

/// The 4-class 8x8 single-channel toy set, normalised with its own statistics.
/// A pure function of `(seed, per_class)`.
pub fn make_toy_dataset(seed: u64, per_class: usize) -> LabeledImageSet {
    assert!(per_class >= 1, "per_class must be at least 1");
    let (raw, labels) = toy_raw(seed, per_class);
    LabeledImageSet::from_raw(raw, labels, TOY_CLASSES).expect("toy set is well formed")
}
