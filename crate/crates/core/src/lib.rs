//! Multi-modal terrain representation learning and gait-parameter regression
//! for a quadruped: a masked image autoencoder, a dilated causal
//! convolutional time-series encoder, cross-attention fusion, a gait
//! regressor with a rate-limiting window, a synthetic terrain generator, and
//! the training/evaluation harness around them.

mod error;
pub mod fusion;
pub mod gait;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod ts;
pub mod vision;

pub use error::{Error, Result};
pub use numerics::{Float, Tape, Tensor, Var};
