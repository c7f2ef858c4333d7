//! A small CPU engine for convolutional networks with hand-written backward
//! passes.
//!
//! Activations are NHWC. Every layer exposes a recording forward pass for
//! training, a read-only evaluation pass, and a backward pass that can skip
//! parameter or input gradients independently.

mod adam;
pub mod im2col;
pub mod layers;
mod scalar;
mod sequential;
pub mod spectral;
mod tensor;

pub use adam::Adam;
pub use layers::{Activation, BatchNorm, Conv2d, ConvTranspose2d, Linear, Param};
pub use scalar::{matmul, Scalar};
pub use sequential::{Backward, Layer, Mode, Residual, Sequential, Trace};
pub use spectral::{top_singular_value, SpectralNorm};
pub use tensor::Tensor;
