//! Framework-free encoder-decoder segmentation stack: a reverse-mode
//! autodiff tape, the layer ops and network, losses and optimizer, the
//! image/mask data pipeline and pixel-wise evaluation metrics.

pub mod audit;
pub mod autograd;
pub mod data;
pub mod error;
#[doc(hidden)]
pub mod gemm;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nn::Mode;
pub use tensor::{Element, Shape, Tensor};
