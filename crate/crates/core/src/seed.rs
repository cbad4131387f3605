//! Stable seed derivation.
//!
//! Every random stream in a run is keyed by a value derived from a parent
//! seed and a path of integers or string tags. The mixing is a fixed
//! SplitMix64 finalizer, so derived seeds never depend on the platform, the
//! `rand` version or the order in which jobs are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` and an integer path.
pub fn derive(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix(parent.wrapping_add(GOLDEN)), |acc, &part| {
            mix(acc ^ mix(part.wrapping_add(GOLDEN)).rotate_left(17))
        })
}

/// Derive a child seed from `parent` and a purpose tag such as `"profile"`.
pub fn derive_tag(parent: u64, tag: &str) -> u64 {
    derive(parent, &[fnv1a(tag.as_bytes())])
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
