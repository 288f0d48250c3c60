//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is derived from a
//! base seed and a string key with FNV-1a followed by a SplitMix64 finalizer.
//! Streams are independent of generation order, so items can be produced in
//! parallel and still match a sequential run bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(key.as_bytes())))
}

/// Independent stream for `(seed, key)`.
pub fn stream(seed: u64, key: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
