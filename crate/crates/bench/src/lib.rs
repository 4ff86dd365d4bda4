//! Fixtures shared by the benchmarks in `benches/`.

use tokcom::rng::{normal_vec, rng_from_seed};
use tokcom::{MllmConfig, SourceSample};

/// `n` standard-normal continuous samples of length `dim`.
pub fn gaussian_samples(n: usize, dim: usize, seed: u64) -> Vec<SourceSample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| SourceSample::continuous(normal_vec(&mut rng, dim)))
        .collect()
}

/// A receiver a few times smaller than the default.
pub fn small_receiver(token_width: usize) -> MllmConfig {
    MllmConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        vocab: 16,
        max_len: 64,
        token_width,
        ff_mult: 2,
        diffusion_steps: 10,
        head_hidden: 32,
        ..MllmConfig::default()
    }
}
