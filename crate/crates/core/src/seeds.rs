//! Deterministic seed derivation.
//!
//! Every random decision in a run is keyed off the run seed plus a stable
//! path (domain tag, stream, iteration, ...), so any component can be
//! recomputed in isolation: no generator state needs to be persisted.

/// SplitMix64 step; a solid 64-bit mixer with full avalanche.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of components.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &part in parts {
        acc = splitmix64(acc ^ splitmix64(part));
    }
    acc
}

/// Domain tag for per-stream reference sampling.
pub const DOMAIN_STREAM_RNG: u64 = 0x73_74_72_65_61_6d; // "stream"
/// Domain tag for re-evaluation reference-order shuffling.
pub const DOMAIN_REEVAL_SHUFFLE: u64 = 0x73_68_75_66_66; // "shuff"
