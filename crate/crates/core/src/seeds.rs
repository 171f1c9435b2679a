//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Seed of substream `name` under `master` (e.g. `"phantom/0"`, `"init"`, `"shuffle"`).
pub fn derive(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, name))
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
