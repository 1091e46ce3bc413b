//! Named random sub-streams derived from one top-level seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DATA_PERTURBATION: &str = "data-perturbation";
pub const AGENT: &str = "agent";
pub const ROLLOUT: &str = "rollout";

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of sub-stream `(name, index)` under `root`. Distinct names or
/// indices give independent ChaCha streams.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    stream_rng(root, name, index).next_u64()
}

pub fn stream_rng(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ fnv1a(name));
    rng.set_stream(index);
    rng
}
