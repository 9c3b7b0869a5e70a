//! Scalar abstraction for the deterministic engine.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating point type the ODE engine can integrate over.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// Converts an `f64` literal or parameter into this scalar type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
