//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run is drawn from a child stream derived from
//! the master seed and a tag path such as `(PLAN, episode, candidate)`. Child
//! streams never share state, so reordering or parallelizing consumers cannot
//! change what any one of them draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for child streams. The numeric values are part of the
/// reproducibility contract: changing them changes every derived stream.
pub mod purpose {
    pub const ENV_RESET: u64 = 1;
    pub const ENV_NOISE: u64 = 2;
    pub const SAMPLE_DRAW: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const ICEM: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SMALL_BALL: u64 = 7;
    pub const SYNTH_ENV: u64 = 8;
    pub const OFFLINE: u64 = 9;
    pub const SKETCH: u64 = 10;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `master` with a tag path into a single stream seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// Builds the child stream for `(master, tags)`.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = derive_rng(7, &[purpose::ICEM, 0]);
        let mut b = derive_rng(7, &[purpose::ICEM, 0]);
        let mut c = derive_rng(7, &[purpose::ICEM, 1]);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn tag_order_matters() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
    }
}
