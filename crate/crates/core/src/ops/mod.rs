//! Differentiable volumetric operators, each with an explicit backward pass.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod pool;

pub use activation::{softmax_backward, softmax_voxelwise, Activation};
pub use batchnorm::BatchNormState;
pub use conv::{conv3d_backward, conv3d_basic, conv3d_forward, ConvConfig, ConvGrads, Kernel};
pub use dropout::{dropout_backward, dropout_forward};
pub use pool::{maxpool3d_backward, maxpool3d_forward, upsample3d_backward, upsample3d_forward};

/// Train mode uses batch statistics and dropout; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
