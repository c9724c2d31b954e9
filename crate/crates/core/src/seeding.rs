//! Seed derivation so that independent random streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream tag.
pub fn derive(parent: u64, tag: u64) -> u64 {
    mix64(mix64(parent) ^ tag.rotate_left(17))
}

pub fn rng_for(parent: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parent, tag))
}

pub(crate) mod tags {
    pub const PERMUTATION: u64 = 0x7065_726d;
    pub const PEBBLES: u64 = 0x7065_6262;
    pub const VESSELS: u64 = 0x7665_7373;
    pub const INIT: u64 = 0x696e_6974;
    pub const AREA: u64 = 0x6172_6561;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const EVAL: u64 = 0x6576_616c;
    pub const EPISODES: u64 = 0x6570_6973;
}
