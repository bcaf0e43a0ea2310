//! The MFTR network and its training objective.

pub mod batch;
pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod extractor;
pub mod layers;
pub mod loss;
pub mod network;
pub mod params;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{Ablation, FusionTemporalMode, ModelConfig};
pub use extractor::{DescriptorStore, FrameExtractor, HashProjection, MobileNetV2};
pub use loss::{loss_cls, loss_pos, total_loss, total_loss_value};
pub use network::{anchor_from_scores, threshold, Losses, Mftr, ModelOutput, Prediction};
