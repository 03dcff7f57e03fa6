//! Seeded random streams. Every stochastic routine takes an explicit seed and
//! draws from ChaCha8, so replicates are reproducible across platforms and
//! worker counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Name recorded in run metadata.
pub const GENERATOR: &str = "ChaCha8";

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`; used to
/// give each parallel chunk its own deterministic randomness.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
