//! Named random sub-streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! derived from the top-level seed plus a stream name and integer indices.
//! Workers therefore never share generator state, and the draws a sample
//! receives do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed`, a stream name and a path of indices.
pub fn derive_seed(seed: u64, stream: &str, path: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in stream.bytes() {
        h = splitmix(h ^ b as u64);
    }
    // separates "ab"+[1] from "a"+[b, 1]
    h = splitmix(h ^ 0xFF);
    for &p in path {
        h = splitmix(h ^ p);
    }
    h
}

pub fn stream(seed: u64, name: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, path))
}
