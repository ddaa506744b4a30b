//! Dense vector/matrix arithmetic, stable softmax, Adam, seeded RNG and
//! the finite-difference gradient checker that validates every
//! hand-derived backward pass in this crate.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod rng;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_flat, GradCheckReport};
pub use matrix::{axpy, dot, Matrix};
pub use ops::{sigmoid, sigmoid_slice, stable_softmax, tanh_slice};
pub use rng::{unit_hash, SplitMix64};
