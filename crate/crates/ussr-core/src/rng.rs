//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha8 generator keyed by
//! the run seed and a fixed stream id, so the same seed reproduces the same
//! run bit for bit regardless of how work is interleaved.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids; one per independent consumer of randomness.
pub mod stream {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Reparameterization noise during training.
    pub const NOISE: u64 = 2;
    /// Data shuffling between epochs.
    pub const SHUFFLE: u64 = 3;
    /// Synthetic data generation.
    pub const SYNTH: u64 = 4;
    /// Perturbation of cloned parameters during expansion.
    pub const PERTURB: u64 = 5;
    /// Evaluation-time noise, kept apart from training noise.
    pub const EVAL: u64 = 6;
    /// Second-phase parameter initialization, so segment nets do not
    /// replay the first phase's draws.
    pub const SEG_INIT: u64 = 7;
}

/// A generator for (seed, stream); the same pair always yields the same
/// sequence.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
