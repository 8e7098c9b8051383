//! Volumetric segmentation with dilated convolutional networks: tensors and
//! differentiable operators, model construction, subvolume sampling, training,
//! majority-vote stitching, metrics, and synthetic phantoms.

pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod phantom;
pub mod pgm;
pub mod sampler;
pub mod stitch;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod vvol;

pub use error::{Error, Result};
