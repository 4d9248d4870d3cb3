//! Embedding networks, their parameter distributions, and the NAS grid.

mod arch;
mod layers;
mod network;
mod sampler;
mod search_space;

pub use arch::{ArchKind, EmbedderConfig, NormKind, Pooling, GROUP_NORM_GROUPS};
pub use layers::{
    Activation, BatchNorm, BatchStats, Conv2d, GroupNorm, Linear, Mode, PoolKind, BN_MOMENTUM, LEAKY_SLOPE, NORM_EPS,
};
pub use network::{cross_entropy, Gradients, NetworkInstance, Tape};
pub use sampler::{sample_network, AccuracyBucket, Checkpoint, CheckpointPool, SamplerStrategy};
pub use search_space::{enumerate_search_space, stratified_subsample, ACTIVATIONS, DEPTHS, NORMS, POOLINGS, WIDTHS};

/// `build_network` under its conventional name.
pub fn build_network(config: &EmbedderConfig, seed: u64) -> crate::Result<NetworkInstance> {
    NetworkInstance::build(config, seed)
}
