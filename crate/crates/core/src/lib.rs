//! Vision-transformer introspection: an instrumented ViT with eight tap points
//! per block, hand-written gradients, linear probes and layer×module sweeps.

pub mod corrupt;
pub mod data;
pub mod error;
pub mod grad;
pub mod io;
pub mod probe;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod vit;

pub use error::{Category, Error, Result};
pub use tensor::{Real, Tensor};
pub use vit::{ModelConfig, ModelWeights, Module, TapId, TapRecord};
