//! Network descriptions, parameters, execution, and checkpoints.

pub mod checkpoint;
pub mod network;
pub mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{ConvParamGrads, ConvParams, Model, ModelGrads, Trace};
pub use spec::{
    build_meshnet, build_unet, parameter_count, receptive_field, ConvLayer, LayerSpec,
    MeshNetVariant, ModelSpec,
};
