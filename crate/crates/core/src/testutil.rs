//! Helpers shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, 1e-4)`. The floor keeps gradients that are
/// identically zero (a bias feeding batch norm) from comparing round-off.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-4)
}

/// Up to `max` evenly spread coordinates of a length-`n` vector.
pub fn probe_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Central differences of `f` at the chosen coordinates of `x`.
pub fn central_diff(x: &mut [f64], coords: &[usize], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(x);
            x[i] = orig - eps;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}
