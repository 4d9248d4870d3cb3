use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchKind, EmbedderConfig, NormKind, Pooling};
use super::layers::Activation;

pub const WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const DEPTHS: [usize; 4] = [1, 2, 3, 4];
pub const ACTIVATIONS: [Activation; 3] = [Activation::Sigmoid, Activation::Relu, Activation::LeakyRelu];
pub const NORMS: [NormKind; 5] = [
    NormKind::None,
    NormKind::Batch,
    NormKind::Layer,
    NormKind::Instance,
    NormKind::Group,
];
pub const POOLINGS: [Pooling; 3] = [Pooling::None, Pooling::Max, Pooling::Avg];

/// The 720-config ConvNet grid, nested width > depth > activation > norm > pooling.
pub fn enumerate_search_space(input_shape: [usize; 3], num_classes: usize) -> Vec<EmbedderConfig> {
    let mut out = Vec::with_capacity(720);
    for width in WIDTHS {
        for depth in DEPTHS {
            for activation in ACTIVATIONS {
                for norm in NORMS {
                    for pooling in POOLINGS {
                        out.push(EmbedderConfig {
                            arch: ArchKind::ConvNet,
                            depth,
                            width,
                            activation,
                            norm,
                            pooling,
                            input_shape,
                            num_classes,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Picks `n` configs that are valid for their input shape, stratified over the
/// (depth, width) cells: strata are filled round-robin in a seeded order and each
/// stratum contributes seeded draws without replacement. The result keeps the
/// grid's enumeration order.
pub fn stratified_subsample(space: &[EmbedderConfig], n: usize, seed: u64) -> Vec<EmbedderConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: Vec<Vec<usize>> = Vec::new();
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for (i, cfg) in space.iter().enumerate() {
        if cfg.validate().is_err() {
            continue;
        }
        let key = (cfg.depth, cfg.width);
        match keys.iter().position(|k| *k == key) {
            Some(p) => strata[p].push(i),
            None => {
                keys.push(key);
                strata.push(vec![i]);
            }
        }
    }
    for s in &mut strata {
        s.shuffle(&mut rng);
    }
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.shuffle(&mut rng);
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        let mut progressed = false;
        for &s in &order {
            if picked.len() == n {
                break;
            }
            if let Some(&idx) = strata[s].get(round) {
                picked.push(idx);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| space[i].clone()).collect()
}
