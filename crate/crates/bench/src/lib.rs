//! Shared inputs for the benchmarks.

use distmatch::networks::EmbedderConfig;
use distmatch::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Standard-normal batch of shape `[n, c, h, w]`.
pub fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("consistent shape")
}

/// The default ConvNet for MNIST-sized inputs at the given width.
pub fn mnist_convnet(width: usize) -> EmbedderConfig {
    let mut cfg = EmbedderConfig::default_for_input([1, 28, 28], 10);
    cfg.width = width;
    cfg
}
