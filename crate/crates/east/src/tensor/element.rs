use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element of a [`super::Tensor`]. Training runs at `f32`; all
/// gradient verification runs at `f64`.
pub trait Element:
    Float + Debug + Display + Default + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
