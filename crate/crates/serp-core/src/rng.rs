//! Seed derivation and the crate's RNG flavor.
//!
//! Every random choice in the crate flows from a `u64` seed through
//! [`SeedStream`] or a derived [`Rng`]. Derivation is stateless mixing, so
//! worker threads can compute per-item seeds independently and in any order
//! without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a domain tag, and an index.
///
/// Distinct (tag, index) pairs give independent streams, e.g. one stream per
/// (epoch, cloud) for perturbation.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(tag)).wrapping_add(index))
}

/// Build an RNG from a derived seed.
pub fn rng_for(master: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag, index))
}

/// Domain tags for seed derivation. Values are arbitrary but frozen:
/// changing them changes every downstream stream.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PERTURB: u64 = 3;
    pub const TOKENIZE: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const HEAD: u64 = 8;
}
