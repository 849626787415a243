//! Dense linear algebra and seeded random streams used throughout the crate.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, Matrix};
pub use rng::{fnv1a, gaussian_direction, splitmix64, SeededRng, RNG_ALGORITHM};
pub use svd::{singular_values, svd, Svd};
