//! PilotNet-style steering regressor: architecture, parameters, training and
//! checkpoints.

mod checkpoint;
mod network;
mod spec;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_checkpoint_bytes, save_checkpoint, ModelMeta, ModelRole,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{param_shapes, ForwardTrace, Model};
pub use spec::{ConvLayerSpec, NetworkSpec};
pub use train::{mean_absolute_error, train, TrainConfig};
