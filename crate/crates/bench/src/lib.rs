//! Shared fixtures for the criterion benches.

use csi_core::{ChannelMatrix, SystemDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_channels(n: usize, dims: &SystemDims, seed: u64) -> Vec<ChannelMatrix> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| ChannelMatrix::random(dims.n_tx, dims.n_sub, &mut r))
        .collect()
}
