use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar the numeric kernels are generic over: f32 or f64.
pub trait Scalar: Float + FromPrimitive + NumCast + Sum + Debug + Default + Send + Sync + 'static {
    /// Lossy conversion from f64 (exact for f64, rounding for f32).
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossless(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widening_is_exact() {
        let x = 0.1f32;
        assert_eq!(x.to_f64_lossless() as f32, x);
        assert_eq!(f64::of(0.1), 0.1);
    }
}
