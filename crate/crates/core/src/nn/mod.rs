//! Minimal CPU network stack: layers with hand-written backward passes,
//! the K-head U-Net, Adam, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use model::{build_model, entropy_map, forward, mean_prediction, softmax, KHeadModel, KHeadOutput, ModelConfig, Segmenter, UNet3d};
pub use tensor::Tensor;
