//! Metric-learning backbone for fin crops: a small CNN trained with triplet
//! loss and online semi-hard mining.

pub mod augment;
pub mod config;
pub mod error;
pub mod loss;
pub mod network;
pub mod preprocess;
pub mod train;
pub mod weights;

pub use config::{AugmentStrategy, BackboneConfig, Optimiser, TrainConfig};
pub use error::{EmbedError, Result};
pub use loss::{batch_loss, mine_semi_hard, triplet_loss, triplet_loss_raw, Mining, Triplet};
pub use network::{ForwardCache, Network, Params};
pub use train::{train, write_history_csv, EpochStats, TrainOutcome};
pub use weights::{load_model, save_model, weights_checksum, ModelSidecar};

use finpipe_core::EmbeddingVector;
use image::RgbImage;

impl Network {
    /// Embeds each image independently in inference mode.
    pub fn embed_batch(&self, images: &[RgbImage]) -> Vec<EmbeddingVector> {
        images.iter().map(|img| self.embed(img)).collect()
    }
}
