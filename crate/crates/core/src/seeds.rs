//! Seed derivation for reproducible Monte-Carlo loops.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines two words into a well-mixed seed.
#[inline]
pub fn mix64(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Seed of the `index`-th sample of a run with the given master seed.
pub fn split(master: u64, index: u64) -> u64 {
    mix64(master, index.wrapping_add(0x5EED))
}
