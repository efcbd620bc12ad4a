//! Scalar abstraction so the math modules work over any IEEE float width.
//!
//! Training-path defaults use `f64`; the concrete aliases live at the crate
//! root (`Tensor64`, `Tensor32`).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for literals and schedule math.
    fn c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 -> scalar conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }

    /// Round half away from zero. Used consistently by the quantizer and the
    /// integer execution path so both agree bit-exactly.
    fn round_half_away(self) -> Self {
        let half = Self::c(0.5);
        if self >= Self::zero() {
            (self + half).floor()
        } else {
            (self - half).ceil()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
