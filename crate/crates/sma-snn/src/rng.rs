//! Seed derivation for reproducible runs.
//!
//! Every stochastic site (init, shuffling, augmentation, dropout, synthesis)
//! draws from a ChaCha stream derived from the run seed plus a fixed list of
//! tags. Deriving instead of sharing one stream keeps results stable when
//! unrelated code adds or removes draws, and makes checkpoint resume exact:
//! epoch k always sees the same stream regardless of how epochs 0..k drew.

use rand::SeedableRng;

pub type SeededRng = rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from `seed` and a tag path.
pub fn derive(seed: u64, tags: &[u64]) -> SeededRng {
    let mut h = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    SeededRng::seed_from_u64(h)
}

/// Stable tag for a string path (layer names etc.).
pub fn tag(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
