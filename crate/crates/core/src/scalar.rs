//! Scalar abstraction shared by every differentiable component.
//!
//! Networks, renderers and optimizers are written once against [`Real`] and
//! instantiated for `f32` (training throughput) and `f64` (gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Identifier written into checkpoints.
    const DTYPE: &'static str;

    /// Converts an `f64` literal or computed constant.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

/// Converts a slice between scalar types.
pub fn convert_slice<A: Real, B: Real>(src: &[A]) -> Vec<B> {
    src.iter().map(|v| B::lit(v.as_f64())).collect()
}
