//! Seedable random streams.
//!
//! Every stochastic component receives its generator explicitly. Independent
//! components of one experiment (GA, networks, trials) draw from distinct
//! ChaCha streams of the same seed so that disabling one never perturbs the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ExperimentRng = ChaCha8Rng;

/// Stream identifiers used by the drivers.
pub mod streams {
    pub const GA: u64 = 1;
    pub const NETWORKS: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const TRAINING: u64 = 5;
    pub const LBFGS: u64 = 6;
    pub const TEST_BED: u64 = 7;
    pub const REPORTING: u64 = 8;
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ExperimentRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for trial `trial` of an experiment seeded with `seed`.
///
/// SplitMix64 finalizer over the pair, so neighbouring trials get unrelated
/// seeds.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut z = seed ^ trial.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
