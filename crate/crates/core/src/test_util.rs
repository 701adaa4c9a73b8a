use rand::Rng;

pub use crate::gradcheck::{fd_check, rel_err};
use crate::{Real, Tensor};

/// Finite-difference agreement expected of exact adjoints.
#[cfg(not(feature = "single"))]
pub const STRICT_TOL: Real = 1e-6;
#[cfg(feature = "single")]
pub const STRICT_TOL: Real = 1e-2;

pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}
