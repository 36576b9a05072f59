//! Radio-map prediction from geographic layouts.
//!
//! * [`tensor`]: dense tensors, reverse-mode differentiation, gradient checks
//!   and the `RMTC` checkpoint container.
//! * [`data`]: synthetic layouts, log-distance pathloss with shadow fading,
//!   16-bit PGM images and on-disk datasets.
//! * [`model`]: the multi-axis attention encoder with a transposed-convolution
//!   decoder, plus a convolutional baseline.
//! * [`train`]: loss, Adam, learning-rate schedule, training loop and metrics.
//! * [`verify`]: the gradient-check suite behind `rmt gradcheck`.
//! * [`cli`]: the `rmt` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
