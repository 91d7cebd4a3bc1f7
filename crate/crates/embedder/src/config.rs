use serde::{Deserialize, Serialize};

use crate::error::{EmbedError, Result};

/// Shape of the convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    /// Output channels of the first block; each later block doubles it.
    pub initial_channels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    /// `(height, width)` of the letterboxed network input.
    pub input_size: (usize, usize),
    pub normalize_embeddings: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_blocks: 2,
            initial_channels: 59,
            kernel_size: 6,
            dropout: 0.17,
            embedding_dim: 106,
            input_size: (128, 128),
            normalize_embeddings: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EmbedError::Config(m));
        if self.num_blocks < 1 {
            return fail("num_blocks must be >= 1".into());
        }
        if self.initial_channels < 1 || self.kernel_size < 1 {
            return fail("initial_channels and kernel_size must be >= 1".into());
        }
        if self.embedding_dim < 2 {
            return fail(format!("embedding_dim must be >= 2, got {}", self.embedding_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let (h, w) = self.feature_size();
        if h == 0 || w == 0 {
            return fail(format!(
                "input {:?} is too small for {} pooling blocks",
                self.input_size, self.num_blocks
            ));
        }
        Ok(())
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.initial_channels << block
    }

    /// Spatial size after the last pooling stage.
    pub fn feature_size(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        for _ in 0..self.num_blocks {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.feature_size();
        self.block_channels(self.num_blocks - 1) * h * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimiser {
    /// Adam with L2 weight decay folded into the gradient.
    AdaptiveMoment,
    StochasticGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimiser: Optimiser,
    pub margin: f64,
    /// Epochs between learning-rate decays.
    pub lr_step_size: usize,
    /// Multiplicative learning-rate decay.
    pub lr_gamma: f64,
    /// Classes per batch.
    pub batch_classes: usize,
    /// Examples per class per batch.
    pub batch_examples_per_class: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 7.25e-6,
            weight_decay: 0.043,
            optimiser: Optimiser::AdaptiveMoment,
            margin: 0.8,
            lr_step_size: 7,
            lr_gamma: 0.012,
            batch_classes: 8,
            batch_examples_per_class: 4,
            epochs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EmbedError::Config(m));
        if !(self.margin > 0.0) {
            return fail(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.lr_gamma > 0.0) {
            return fail(format!("lr_gamma must be > 0, got {}", self.lr_gamma));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return fail("learning rate must be > 0 and weight decay >= 0".into());
        }
        if self.batch_classes < 2 || self.batch_examples_per_class < 2 {
            return fail(format!(
                "batches need >= 2 classes x >= 2 examples, got {} x {}",
                self.batch_classes, self.batch_examples_per_class
            ));
        }
        if self.lr_step_size == 0 {
            return fail("lr_step_size must be >= 1".into());
        }
        Ok(())
    }

    /// Step schedule: the rate is multiplied by `lr_gamma` every
    /// `lr_step_size` epochs (epochs counted from 0).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_gamma.powi((epoch / self.lr_step_size) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStrategy {
    ColourJitter,
    PerspectiveShift,
    Both,
    None,
}

impl AugmentStrategy {
    pub const ALL: [AugmentStrategy; 4] = [
        AugmentStrategy::ColourJitter,
        AugmentStrategy::PerspectiveShift,
        AugmentStrategy::Both,
        AugmentStrategy::None,
    ];

    pub fn display_name(&self) -> &'static str {
        match self {
            AugmentStrategy::ColourJitter => "Colour Jitter",
            AugmentStrategy::PerspectiveShift => "Perspective Shift",
            AugmentStrategy::Both => "Both",
            AugmentStrategy::None => "None",
        }
    }
}

impl std::str::FromStr for AugmentStrategy {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "colour_jitter" | "color_jitter" => Ok(AugmentStrategy::ColourJitter),
            "perspective_shift" | "perspective" => Ok(AugmentStrategy::PerspectiveShift),
            "both" => Ok(AugmentStrategy::Both),
            "none" => Ok(AugmentStrategy::None),
            other => Err(EmbedError::Config(format!("unknown augmentation strategy `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        BackboneConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(BackboneConfig::default().block_channels(1), 118);
        assert_eq!(BackboneConfig::default().feature_len(), 118 * 32 * 32);
    }

    #[test]
    fn lr_schedule() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at_epoch(0), 7.25e-6);
        assert_eq!(tc.lr_at_epoch(6), 7.25e-6);
        assert!((tc.lr_at_epoch(7) - 7.25e-6 * 0.012).abs() < 1e-20);
        assert!((tc.lr_at_epoch(14) - 7.25e-6 * 0.012 * 0.012).abs() < 1e-22);
    }

    #[test]
    fn invalid_configs() {
        let tc = TrainConfig { batch_examples_per_class: 1, ..Default::default() };
        assert!(tc.validate().is_err());
        let tc = TrainConfig { margin: 0.0, ..Default::default() };
        assert!(tc.validate().is_err());
        let bc = BackboneConfig { num_blocks: 8, input_size: (64, 64), ..Default::default() };
        assert!(bc.validate().is_err());
        assert!("Perspective Shift".parse::<AugmentStrategy>().is_ok());
        assert!("warp".parse::<AugmentStrategy>().is_err());
    }
}
