//! Named, seed-keyed random substreams.
//!
//! Every consumer of randomness derives its own generator from the run seed,
//! a tag and a few integer coordinates (epoch, step, slot). Streams never
//! share state, so reordering one consumer cannot perturb another, and a
//! resumed run regenerates exactly the streams it would have used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream(seed: u64, tag: &str, coords: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Derives a 64-bit seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    use rand::RngCore;
    substream(seed, tag, &[]).next_u64()
}
