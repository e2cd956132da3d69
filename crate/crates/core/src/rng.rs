//! Seeded random streams.
//!
//! Every stochastic draw in the crate goes through [`Stream`], a ChaCha8
//! generator whose output is stable across platforms and crate versions.
//! Child streams are derived by drawing a fresh seed from the parent, so a
//! single root seed fixes the whole run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child stream from `parent`.
pub fn child<R: Rng + ?Sized>(parent: &mut R) -> Stream {
    ChaCha8Rng::from_seed(parent.random())
}

/// Uniform draw on the open interval (0, 1).
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::Open01)
}
