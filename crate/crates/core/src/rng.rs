//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a stream derived from a
//! `(seed, domain, index)` triple: weight init, per-epoch shuffles, training
//! noise, initial membrane voltages, and subset selection each get their own
//! domain. Because a stream's content depends only on the triple, results do
//! not depend on batch partitioning, evaluation order, or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `index` within the named domain of `seed`.
pub fn substream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ 0x5bf0_3635_dee8_a2b1);
    for &b in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(h ^ index))
}
