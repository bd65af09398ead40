//! Core engine for lesionforge: a small CNN engine, SLIC superpixels, unsupervised
//! deep clustering, candidate masks, the two-region mask selection environment,
//! the DQN agent and evaluation statistics.

pub mod candidates;
pub mod checks;
pub mod cluster;
pub mod dqn;
pub mod env;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod superpixel;
pub mod synth;

pub use error::{Error, Result};

/// Seeded RNG used everywhere determinism matters.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
