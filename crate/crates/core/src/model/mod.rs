//! The segmentation network, its parameter accounting and checkpoints.

mod checkpoint;
mod config;
mod count;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use count::{param_count, ParamBreakdown};
pub use net::{Bottleneck, DecoderStage, Encoder, EncoderOut, Head, LearnedUpsample, MmriNet, ModelOutput, Pfa};
