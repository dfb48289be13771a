//! Seeded random streams. Every stochastic routine takes an explicit stream
//! so runs are reproducible from `(seed, scenario)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Master stream for a seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of a master seed (ensemble members,
/// replications, sweep points).
pub fn substream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Seed for child `index` of `seed`, for routines that take a seed rather
/// than a stream.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, index).next_u64()
}
