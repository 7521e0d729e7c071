//! Dense NCHW tensors, the primitive operations a convolutional network is built
//! from, reverse-mode differentiation over them, and a finite-difference oracle.
//!
//! Models are generic over [`Float`]: `f32` for normal operation and `f64` when
//! checking gradients.

mod autodiff;
mod error;
mod float;
mod gradcheck;
pub mod ops;
mod param;
mod tensor;

pub use autodiff::{AutodiffTape, Ctx, Grads, Mode, Probe, ProbeRow, Var};
pub use error::{Error, Result};
pub use float::Float;
pub use gradcheck::{grad_check, relative_error, vjp, FnTarget, GradCheck, GradReport, GradTarget, Stencil, Worst};
pub use ops::{Activation, BnMode, MacCounter, PoolKind};
pub use param::{name_hash, shape_for_dims, Initializer, Param};
pub use tensor::{Shape, Tensor};
