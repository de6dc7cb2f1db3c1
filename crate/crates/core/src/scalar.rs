//! Floating-point abstraction shared by every estimator in the crate.

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over. Implemented for `f32` and `f64`.
///
/// Tolerances that only make sense relative to machine precision are carried
/// as associated constants so the same algorithms run in single precision.
pub trait Scalar: NdFloat + FromPrimitive + ToPrimitive + Default + std::iter::Sum {
    /// Relative coordinate-descent stopping tolerance.
    const SOLVER_TOL: f64;
    /// Relative rank tolerance for pivoted QR.
    const RANK_TOL: f64;
    /// Largest accepted condition number for moment matrices.
    const COND_LIMIT: f64;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f64 {
    const SOLVER_TOL: f64 = 1e-9;
    const RANK_TOL: f64 = 1e-10;
    const COND_LIMIT: f64 = 1e12;
}

impl Scalar for f32 {
    const SOLVER_TOL: f64 = 1e-5;
    const RANK_TOL: f64 = 1e-5;
    const COND_LIMIT: f64 = 1e5;
}
