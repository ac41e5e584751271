//! Seeded random streams.
//!
//! Every stochastic draw in the crate comes from `ChaCha8Rng::seed_from_u64(seed)`
//! with a purpose-specific ChaCha stream id, so noise, sampling and
//! initialisation never share a sequence and remain replayable from the
//! single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recorded in checkpoints and reports.
pub const PRNG_ALGORITHM: &str = "chacha8/seed_from_u64/stream-split";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    TrainNoise = 1,
    TestNoise = 2,
    Init = 3,
    Episodes = 4,
    Evaluation = 5,
    SelfTest = 6,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
