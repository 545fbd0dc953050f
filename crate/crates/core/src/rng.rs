//! Seeded random streams.
//!
//! Every random quantity in an experiment is drawn from its own ChaCha
//! stream, addressed by `(seed, purpose, index)`. ChaCha is counter based, so
//! streams with different addresses never overlap and a stream can be
//! regenerated without replaying any other.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream is used for. Part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Ensemble = 1,
    Noise = 2,
    Truth = 3,
    Coefficients = 4,
}

/// Returns the generator for stream `index` of `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}
