//! Dense tensors with reverse-mode automatic differentiation, plus the
//! convolutional, recurrent and attention layers the detectors are built from.
//!
//! Everything runs on [`Scalar`], which is `f32` unless the `f64` feature is
//! enabled.

pub mod checkpoint;
mod error;
pub mod functional;
mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tape;
mod tensor;

#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{apply_bn_updates, Forward};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Conv2dSpec, Tape, Var};
pub use tensor::Tensor;
