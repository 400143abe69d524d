//! Seeded generators.
//!
//! Every random draw in the crate goes through a ChaCha8 stream seeded with
//! `seed_from_u64`. Streams that must not depend on iteration order are keyed:
//! the key parts are joined with `/` after the decimal seed and hashed with
//! 64-bit FNV-1a, and the hash seeds the stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encode::fnv1a64;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keyed on `(seed, parts...)`, e.g. `keyed(7, &["s01", "3"])`.
pub fn keyed(seed: u64, parts: &[&str]) -> Rng {
    let mut key = seed.to_string();
    for part in parts {
        key.push('/');
        key.push_str(part);
    }
    seeded(fnv1a64(key.as_bytes()))
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one `next_u64`.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[-1, 1)`.
pub fn symmetric_f64(rng: &mut impl RngCore) -> f64 {
    2.0 * unit_f64(rng) - 1.0
}
