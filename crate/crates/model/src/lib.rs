//! Slice-sequential segmentation model for volumetric EM stacks: a
//! LoRA-bypassed encoder, multi-scale feature enhancer, slot-memory
//! attention with EMA updates, a bi-directional two-stage self-prompting
//! decoder, and the training math around them (Dice+BCE loss, AdamW,
//! augmentation, metrics, checkpoints).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod enhancer;
mod error;
pub mod layers;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod prompt;

pub use config::{AblationFlags, ModelConfig};
pub use error::{ModelError, Result};
pub use layers::NormMode;
pub use model::{load_model, save_model, SliceModel, SliceState, SliceStep, SliceTrace};
