//! Named substreams derived from one master seed.
//!
//! Every random decision in the pipeline (dataset poses, backgrounds,
//! corruption draws, weight init, batch shuffling) pulls its seed from
//! `substream`, so components can be varied independently without
//! perturbing the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixing of a 64-bit state.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `(master, stream name, index)`.
///
/// Stable across platforms and releases: FNV-1a over the name bytes,
/// then splitmix64 rounds folding in master and index.
pub fn substream(master: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(index))
}

/// Seeded RNG for a named substream.
pub fn rng(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(master, name, index))
}
