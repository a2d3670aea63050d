//! Contrastive (NT-Xent) video pretraining and frozen-encoder regression of
//! cardiac output from 32-frame grayscale clips.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`data`] and [`rng`]: domain types, manifests, splits, seeded streams
//! * [`preprocess`]: raw video to 32×224×224×1 clip tensors
//! * [`augment`]: SimCLR-style, temporally consistent view generation
//! * [`contrastive`]: projection head and the NT-Xent objective
//! * [`nn`] and [`models`]: transformer layers, the video encoder, the regression head
//! * [`train`]: pretraining, fine-tuning and end-to-end supervised training
//! * [`evaluate`]: MAE / Pearson / R², mean baseline, seed aggregation
//! * [`synthdata`]: a deterministic echo-like clip generator
//! * [`io`]: on-disk containers for raw clips, clip tensors and checkpoints

pub mod augment;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use augment::{AugmentConfig, CropBox, ViewParams};
pub use contrastive::{EmbeddingBatch, ProjectionHead};
pub use data::{Clip, Manifest, ManifestEntry, RawClip, SplitSpec};
pub use error::{Error, Result};
pub use evaluate::{MetricsReport, SeedMetrics};
pub use models::{EncoderConfig, EncoderVariant, RegressionHead, VideoEncoder};
pub use rng::RngStream;
pub use synthdata::SynthConfig;
pub use train::{Stage, TrainConfig};

/// Frames per clip after preprocessing.
pub const CLIP_FRAMES: usize = 32;
/// Spatial side of a preprocessed frame.
pub const CLIP_SIDE: usize = 224;
