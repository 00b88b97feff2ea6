//! Counter-style seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a tuple
//! of integers (global seed, purpose tag, phase, epoch, sample index, ...).
//! Streams are independent of evaluation order, so parallel and serial code
//! paths produce identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod tag {
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const VIEWS: u64 = 0x5649_4557;
    pub const GAUSSIAN_TARGET: u64 = 0x4741_5553;
    pub const STATISTICS: u64 = 0x5354_4154;
    pub const INIT: u64 = 0x494e_4954;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const DIAGNOSTIC: u64 = 0x4449_4147;
    pub const CONTROL: u64 = 0x4354_524c;
    pub const TEMPLATE: u64 = 0x544d_504c;
    pub const NOISE: u64 = 0x4e4f_4953;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a tuple of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A ChaCha8 generator for the stream identified by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
