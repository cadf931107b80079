//! Seed plumbing: a single master seed is split into independent
//! counter-based streams, one per (purpose, index) pair, so that dataset
//! sampling, initialization and evaluation draws never interleave and
//! results are independent of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; each purpose gets its own derived seed space.
pub const TAG_TRAIN_DATA: u64 = 0x01;
pub const TAG_TEST_DATA: u64 = 0x02;
pub const TAG_INIT: u64 = 0x03;
pub const TAG_EVAL: u64 = 0x04;
pub const TAG_GRADCHECK: u64 = 0x05;
pub const TAG_ASSUMPTION_MC: u64 = 0x06;

/// splitmix64 finalizer; decorrelates derived seeds.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for stream `index` of the purpose-derived seed.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag));
    rng.set_stream(index);
    rng
}
