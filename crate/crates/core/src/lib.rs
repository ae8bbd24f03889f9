pub mod dataset;
pub mod error;
pub mod eval;
pub mod failcast;
pub mod model;
pub mod rng;
pub mod saliency;
pub mod scenegen;
pub mod tensor;

pub use dataset::{FrameDataset, InputKind, LabelKind};
pub use error::{Error, Result};
pub use model::{Model, NetworkSpec};
pub use rng::Rng;
pub use tensor::Tensor;
