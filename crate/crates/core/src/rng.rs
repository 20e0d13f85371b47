//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (data generation, parameter init, masks,
//! reparameterization noise, evaluation masks) draws from its own stream, so
//! adding a consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for substream `name`, index `index` under `root`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name)).wrapping_add(splitmix64(index)))
}

pub fn stream(root: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, name, index))
}
