//! Scalar abstraction so the same graph code runs in f32 (training) and
//! f64 (gradient-check oracle).

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}
