//! Deterministic seed derivation.
//!
//! Every random draw inside the solvers is keyed by a tuple of small integers
//! (base seed, time step, restart index, purpose), never by data. Finite
//! differences over attack counts therefore see the exact same initial points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Learn = 1,
    Patrol = 2,
    Outer = 3,
    Step = 4,
    Game = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a child index and stream tag into a parent seed.
pub fn derive(parent: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ (stream as u64).rotate_left(48)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
