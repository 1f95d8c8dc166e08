//! Counter-based pseudo-random numbers.
//!
//! Values are a pure function of `(seed, stream, counter, index)`, so dropout
//! masks do not depend on how many other random draws happened before them.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple to a 64-bit value.
pub fn hash4(seed: u64, stream: u64, counter: u64, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream);
    h = splitmix64(h ^ counter);
    splitmix64(h ^ index)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(seed: u64, stream: u64, counter: u64, index: u64) -> f64 {
    (hash4(seed, stream, counter, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
