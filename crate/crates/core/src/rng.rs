//! Counter-based random streams.
//!
//! Every stream is ChaCha20 keyed by the user seed, with the 64-bit stream id
//! derived from a tag. Weight tensors use the tag `(depth unit, role)`, so
//! adding layers never shifts the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha20Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(splitmix(tag));
    r
}

pub fn tensor_stream(seed: u64, unit: usize, role: u32) -> Rng {
    stream(seed, ((unit as u64) << 16) | role as u64)
}

/// Stream keyed by a name (FNV-1a) mixed with an index.
pub fn named(seed: u64, name: &str, index: u64) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    stream(seed ^ splitmix(index), h)
}

/// Derive a child seed, used for per-init and per-draw substreams.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
