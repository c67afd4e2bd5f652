//! Derivation of independent random streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sub-seed for `purpose`, further keyed by any number of integers
/// (step, sample index, ...).
pub fn derive_seed(seed: u64, purpose: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(purpose.as_bytes()));
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}

pub fn rng_for(seed: u64, purpose: &str, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, keys))
}
