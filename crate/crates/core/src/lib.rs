//! Bi-temporal burned-area segmentation with a ViT encoder, low-rank
//! adapters and a UPerNet-style decoder.

pub mod backbone;
pub mod dataplane;
pub mod engine;
mod error;
pub mod lora;
pub mod model;
pub mod objective;
pub mod params;
pub mod seghead;
pub mod tiler;

pub use backbone::{Strategy, ViTConfig};
pub use dataplane::{Mask, Patch, RasterScene};
pub use engine::{Checkpoint, ParamReport, Scope, TrainConfig};
pub use error::{Error, Result};
pub use lora::LoraSpec;
pub use model::{BandNorm, Model, ModelAssembly, ModelConfig};
pub use objective::{ClassWeights, ConfusionCounts};
pub use seghead::HeadConfig;
pub use tiler::TileJob;
