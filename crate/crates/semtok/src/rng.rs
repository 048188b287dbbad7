//! Named, reproducible random streams.
//!
//! Every stage that needs randomness asks for a stream by name ("init",
//! "gumbel", "shuffle", "data", ...). The stream key is a hash of the run
//! seed and the name, so streams are independent of each other and of the
//! order in which stages run, and a given (seed, name) pair always yields
//! the same draws on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Stream used by synthetic data generation.
pub const STREAM_DATA: &str = "data";
/// Stream used for parameter initialization.
pub const STREAM_INIT: &str = "init";
/// Stream used for Gumbel noise during soft quantization.
pub const STREAM_GUMBEL: &str = "gumbel";
/// Stream used for per-epoch batch shuffling.
pub const STREAM_SHUFFLE: &str = "shuffle";

/// Deterministic RNG for the given seed and stream name.
pub fn stream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xfe]); // separator so (1, "ab") != (16, "b") style collisions cannot occur
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
