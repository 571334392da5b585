//! Counter-based seed derivation: each random stream is a pure function of
//! `(master_seed, domain, index)`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Half-sample draws for little bags.
pub(crate) const DOMAIN_HALF_SAMPLE: u64 = 0x4841_4c46;
/// Per-tree subsampling, honesty split and tree growth.
pub(crate) const DOMAIN_TREE: u64 = 0x5452_4545;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed for child stream `index` of `master` (e.g. one per replication).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub(crate) fn stream_rng(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}
