//! Video encoder, regression head and the persisted model state.

mod checkpoint;
mod encoder;
mod head;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{EncoderCache, EncoderConfig, EncoderVariant, VideoEncoder};
pub use head::{regress, HeadCache, RegressionHead, HEAD_DROPOUT, HEAD_HIDDEN};

use ndarray::{Array1, Array2};

use crate::data::Clip;
use crate::error::Result;
use crate::nn::Parameterized;

/// Encoder plus scalar head: the object fine-tuning produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub encoder: VideoEncoder<f32>,
    pub head: RegressionHead,
}

impl RegressionModel {
    pub fn new(encoder: VideoEncoder<f32>, head: RegressionHead) -> Self {
        Self { encoder, head }
    }

    /// Encoder representations widened to `f64`.
    pub fn features(&self, clips: &[Clip]) -> Result<Array2<f64>> {
        Ok(self.encoder.encode(clips)?.mapv(f64::from))
    }

    pub fn predict(&self, clips: &[Clip]) -> Result<Array1<f64>> {
        let h = self.features(clips)?;
        self.head.predict(&h.view())
    }

    pub fn encoder_frozen(&self) -> bool {
        !self.encoder.is_trainable()
    }
}

/// Marks every encoder parameter non-trainable; the head stays trainable.
pub fn freeze_encoder(mut model: RegressionModel) -> RegressionModel {
    model.encoder.set_trainable(false);
    model.head.set_trainable(true);
    model
}

pub fn unfreeze_encoder(mut model: RegressionModel) -> RegressionModel {
    model.encoder.set_trainable(true);
    model
}
