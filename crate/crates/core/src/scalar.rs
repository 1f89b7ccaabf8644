use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the numerical kernels are written against: `f32` or `f64`.
///
/// `VALIDATION_TOL` is the slack used when checking invariants such as
/// "rows sum to one" or "rows have unit norm". It is 1e-9 for `f64` and
/// correspondingly looser for `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const VALIDATION_TOL: f64;

    /// Converts an `f64` constant. Every `f64` is representable (possibly rounded) in both impls.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must convert")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn tol() -> Self {
        Self::lit(Self::VALIDATION_TOL)
    }
}

impl Scalar for f64 {
    const VALIDATION_TOL: f64 = 1e-9;
}

impl Scalar for f32 {
    const VALIDATION_TOL: f64 = 1e-5;
}
