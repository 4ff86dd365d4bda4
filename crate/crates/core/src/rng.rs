//! Seeded random streams.
//!
//! One master seed fans out into independent ChaCha streams keyed by purpose
//! and an index, so that e.g. changing the channel SNR never perturbs the
//! parameter initialization drawn from the same master seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Init = 2,
    Channel = 3,
    Sampling = 4,
    Split = 5,
    Training = 6,
}

/// Counter-based splitter over a master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    master: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Generator for `(stream, index)`. Distinct pairs give independent streams.
    pub fn rng(&self, stream: Stream, index: u64) -> SimRng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(self.master ^ splitmix64(stream as u64)));
        rng.set_stream(index);
        rng
    }

    /// A derived 64-bit seed for `(stream, index)`, e.g. for recording in a checkpoint.
    pub fn seed(&self, stream: Stream, index: u64) -> u64 {
        self.rng(stream, index).random()
    }
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
