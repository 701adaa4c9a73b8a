//! Fully convolutional self-similarity (FCSS) dense descriptors.
//!
//! The pipeline runs a small convolutional backbone, measures learned
//! self-similarity patterns on each tapped activation map, gates and pools
//! the responses, and concatenates them into a unit-norm descriptor per
//! pixel. Training mines positives and hard negatives from forward-backward
//! consistent matches inside object boxes.

pub mod backbone;
pub mod css;
pub mod descriptor;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod io;
pub mod learning;
pub mod matching;
pub mod model;
pub mod selftest;
pub mod tensor;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Tensor};

/// Element type of every tensor in the crate.
#[cfg(not(feature = "single"))]
pub type Real = f64;
#[cfg(feature = "single")]
pub type Real = f32;

/// Guard added under the square root of every per-pixel normalization.
pub const NORM_EPS: Real = 1e-8;
