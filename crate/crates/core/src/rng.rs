//! Seeded, splittable randomness.
//!
//! All stochastic code draws from ChaCha8, a counter-based generator. A
//! `(seed, stream)` pair selects an independent keystream, so replicate `r`
//! of a Monte Carlo run always sees the same numbers no matter which thread
//! runs it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream reserved for dataset simulation.
pub const STREAM_DATA: u64 = 0;
/// Stream reserved for fold assignment.
pub const STREAM_FOLDS: u64 = 1;
/// Stream reserved for network initialisation.
pub const STREAM_INIT: u64 = 2;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for replicate `index` of a run seeded with `master`.
///
/// SplitMix64 finaliser over `(master, index)`; distinct indices give
/// well-separated seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
