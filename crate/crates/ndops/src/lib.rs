//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations a stereo cost-volume network needs are provided:
//! 2-D/3-D (transposed) convolution, per-channel affine normalisation, ReLU,
//! softmax, linear resampling, and a handful of layout and reduction ops.
//! Every op is a free function that records its result on a [`Tape`].

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use conv::{conv2d, conv3d, deconv3d, ConvParams};
pub use error::{NdError, Result};
pub use gradcheck::{grad_check, grad_check_many, random_projection, GradCheckConfig, GradCheckReport};
pub use interp::{interpolate, resize_linear, InterpMode};
pub use tape::{Backward, MacCount, Tape, Var};
pub use tensor::{Real, Tensor};
