//! Layer ops with analytic backward rules registered on the tape.

mod activation;
mod batchnorm;
pub mod conv;
mod dropout;

pub use activation::{relu, sigmoid, softmax_channels};
pub use batchnorm::{batchnorm2d, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d, conv_transpose2d, ConvGeometry};
pub use dropout::{dropout2d, dropout2d_with_mask, DropoutState};

/// Train mode uses batch statistics and active dropout; eval mode is a
/// deterministic function of inputs and stored state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
