//! Volume pipeline: stack ingestion, slice-sequential tiled inference with
//! per-tile memory propagation, synthetic fixtures, the training loop, and
//! metric evaluation.

pub mod ablate;
mod error;
pub mod eval;
pub mod infer;
pub mod manifest;
pub mod masks;
pub mod stack;
pub mod synth;
pub mod tiles;
pub mod train;

pub use error::{PipelineError, Result};
pub use infer::{segment_volume, segment_volume_ordered};
pub use stack::{load_stack, save_slice_dir, VolumeStack};
pub use synth::{make_synthetic_volume, SynthKind};
pub use tiles::{plan_tiles, TileGrid};
pub use train::{train, TrainConfig, TrainOutcome};
