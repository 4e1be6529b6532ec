//! Stable keyed hashing.
//!
//! Everything that must be reproducible from a seed alone (faulty-operand
//! subsets, operand schedules, cohort splits, workload noise) goes through
//! these functions instead of `std::hash`, whose output is not stable across
//! toolchains.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed hash over a sequence of 64-bit words.
///
/// Each word is absorbed with a SplitMix64 round; the word count is folded in
/// last so `[a]` and `[a, 0]` hash differently.
#[inline]
pub fn keyed_hash(key: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(key ^ 0x6A09_E667_F3BC_C908);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    splitmix64(h ^ (words.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Map a hash to `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Threshold such that `h < threshold` holds for a `fraction` of all u64 values.
///
/// `fraction >= 1` maps to `u64::MAX` and is handled by callers as "always".
#[inline]
pub fn fraction_threshold(fraction: f64) -> u64 {
    if fraction >= 1.0 {
        u64::MAX
    } else if fraction <= 0.0 {
        0
    } else {
        // 2^64 * fraction, computed in f64; exact to 53 bits which is all a
        // probability carries anyway.
        (fraction * 18_446_744_073_709_551_616.0) as u64
    }
}

/// `h` falls in the lowest `fraction` of the hash space.
#[inline]
pub fn below_fraction(h: u64, fraction: f64) -> bool {
    if fraction >= 1.0 {
        true
    } else {
        h < fraction_threshold(fraction)
    }
}

/// Fold a short ASCII tag into a word so it can be mixed into keys.
pub const fn tag(s: &str) -> u64 {
    let b = s.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < b.len() {
        h ^= b[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    h
}
