//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stable 64-bit hash of a name.
pub fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Independent stream for one component (`"data"`, `"init"`, `"augment"`, `"hpo"`, ...).
pub fn substream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(seed ^ name_hash(name))
}

/// Stream for item `index` of a component, so items can be generated in any order.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(seed ^ name_hash(name) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
