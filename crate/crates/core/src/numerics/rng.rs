//! Reproducible random streams.
//!
//! Every stochastic draw is taken from a ChaCha stream keyed by the root
//! seed and a stream id, so any draw can be regenerated without replaying
//! the draws that preceded it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stream ids for the different consumers of randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Scenario = 2,
    KMeans = 3,
    Shuffle = 4,
    TrainNoise = 5,
    InferenceNoise = 6,
    Test = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed; stable across platforms and releases.
pub fn derive_seed(root: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix(splitmix(root ^ splitmix(purpose as u64)) ^ index)
}

pub fn stream(root: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(splitmix(purpose as u64) ^ splitmix(index.wrapping_add(0x51)));
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
