// index loops mirror the math; negated comparisons also reject NaN
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod consistency;
pub mod container;
pub mod error;
pub mod field;
pub mod image_buf;
pub mod metrics;
pub mod mls;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod scene;
pub mod style;
pub mod stylizer;
pub mod trainer;

pub use error::{Error, Result};
pub use image_buf::ImageBuffer;
pub use scalar::Real;

/// Single-precision field, the working precision of training and rendering.
pub type Field32 = field::FieldParams<f32>;
/// Double-precision field, used for gradient checks.
pub type Field64 = field::FieldParams<f64>;
pub type Mls32 = mls::MlsParams<f32>;
pub type Mls64 = mls::MlsParams<f64>;
