//! Catalogue domain types and their durable store.
//!
//! A catalogue is the single source of truth for survey images, detected
//! regions, catalogued individuals (one of which is the reserved noise
//! class), their example embeddings, and their median prototypes.

mod embfile;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::{BBox, BinaryMask};
use crate::matcher::{MatchResult, MatcherConfig};

pub use embfile::{read_embeddings, write_embeddings, EMBEDDING_MAGIC, EMBEDDING_HEADER_LEN};
pub use store::{open_store, open_store_with, DecisionOutcome, Store, StoreOptions, MANIFEST_FILE};

/// Id of the reserved noise-class individual.
pub const NOISE_ID: &str = "noise";

pub const DEFAULT_DIMENSION: usize = 106;

/// UTC ISO-8601 timestamp with second precision.
pub fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Location relative to the store root.
    pub path: String,
    pub width_px: u32,
    pub height_px: u32,
    #[serde(default)]
    pub survey_meta: BTreeMap<String, String>,
}

/// Processing state of a region; only ever moves forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiState {
    Raw,
    Postprocessed,
    Embedded,
    Reviewed,
}

/// One detected fin region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub id: String,
    pub image_id: String,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub confidence: f64,
    pub class_label: String,
    pub provenance: String,
    pub state: RoiState,
}

impl RoiRecord {
    /// Builds a raw record whose box is the tight box of `mask`.
    pub fn new(
        id: impl Into<String>,
        image_id: impl Into<String>,
        mask: BinaryMask,
        confidence: f64,
        class_label: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let bbox = mask.bbox().ok_or(CoreError::EmptyMask)?;
        let roi = RoiRecord {
            id: id.into(),
            image_id: image_id.into(),
            mask,
            bbox,
            confidence,
            class_label: class_label.into(),
            provenance: provenance.into(),
            state: RoiState::Raw,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        let tight = self.mask.bbox();
        if tight != Some(self.bbox) {
            return Err(CoreError::BBoxMismatch {
                bbox: self.bbox,
                tight,
            });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(CoreError::InvalidConfig(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn advance(&mut self, to: RoiState) -> Result<()> {
        if to < self.state {
            return Err(CoreError::InvalidState(format!(
                "RoI {} cannot move from {:?} back to {:?}",
                self.id, self.state, to
            )));
        }
        self.state = to;
        Ok(())
    }
}

/// Fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, normalized: bool) -> Self {
        EmbeddingVector { values, normalized }
    }

    /// Scales to unit Euclidean norm (a zero vector is left as is).
    pub fn normalized(values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let values = if norm > 0.0 {
            values.iter().map(|&v| (v as f64 / norm) as f32).collect()
        } else {
            values
        };
        EmbeddingVector {
            values,
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(CoreError::EmbeddingDimension {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

/// Median embedding standing in for one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub individual_id: String,
    pub values: Vec<f32>,
    pub normalized: bool,
    pub example_count: usize,
    pub created_at: String,
}

impl Prototype {
    pub fn vector(&self) -> EmbeddingVector {
        EmbeddingVector::new(self.values.clone(), self.normalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub label: String,
    pub is_noise: bool,
    pub roi_ids: Vec<String>,
    pub prototype: Option<Prototype>,
    /// Example embeddings; persisted in the individual's binary file, not the
    /// manifest.
    #[serde(skip)]
    pub embeddings: Vec<EmbeddingVector>,
}

impl Individual {
    pub fn noise() -> Self {
        Individual {
            id: NOISE_ID.to_string(),
            label: "noise".to_string(),
            is_noise: true,
            roi_ids: Vec::new(),
            prototype: None,
            embeddings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    ConfirmedMatch,
    ConfirmedNew,
    MarkedNoise,
}

/// A processed RoI awaiting a reviewer's decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub roi_id: String,
    /// Crop location relative to the store root.
    pub crop_path: String,
    pub match_result: MatchResult,
    pub status: ReviewStatus,
    /// Creation order within the store; the queue is served oldest-first.
    pub seq: u64,
    /// Individual the decision attached the RoI to, once decided.
    #[serde(default)]
    pub resolved_individual: Option<String>,
}

/// A reviewer's verdict on one review item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Match { individual_id: String },
    NewIndividual { label: String },
    Noise,
}

/// Full in-memory catalogue state.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    pub id: String,
    pub version: u64,
    pub dimension: usize,
    pub individuals: Vec<Individual>,
    pub matcher_config: MatcherConfig,
    pub embedder_config_ref: Option<String>,
    pub images: BTreeMap<String, ImageRecord>,
    pub rois: BTreeMap<String, RoiRecord>,
    /// Embeddings of RoIs that have been embedded but not yet assigned.
    pub roi_embeddings: BTreeMap<String, EmbeddingVector>,
    pub reviews: Vec<ReviewItem>,
    /// Counter backing generated ids.
    pub next_seq: u64,
}

impl Catalogue {
    pub fn empty(id: impl Into<String>, dimension: usize, matcher_config: MatcherConfig) -> Self {
        Catalogue {
            id: id.into(),
            version: 0,
            dimension,
            individuals: vec![Individual::noise()],
            matcher_config,
            embedder_config_ref: None,
            images: BTreeMap::new(),
            rois: BTreeMap::new(),
            roi_embeddings: BTreeMap::new(),
            reviews: Vec::new(),
            next_seq: 1,
        }
    }

    pub fn individual(&self, id: &str) -> Option<&Individual> {
        self.individuals.iter().find(|i| i.id == id)
    }

    pub fn individual_mut(&mut self, id: &str) -> Option<&mut Individual> {
        self.individuals.iter_mut().find(|i| i.id == id)
    }

    pub fn noise_individual(&self) -> &Individual {
        self.individuals
            .iter()
            .find(|i| i.is_noise)
            .expect("catalogue always holds a noise individual")
    }

    pub fn review(&self, roi_id: &str) -> Option<&ReviewItem> {
        self.reviews.iter().find(|r| r.roi_id == roi_id)
    }

    /// Pending review items, oldest first.
    pub fn pending_reviews(&self) -> Vec<&ReviewItem> {
        let mut items: Vec<&ReviewItem> = self
            .reviews
            .iter()
            .filter(|r| r.status == ReviewStatus::Pending)
            .collect();
        items.sort_by_key(|r| r.seq);
        items
    }

    /// Checks the structural invariants: a single noise individual, unique
    /// ids, and a shared prototype dimension.
    pub fn validate(&self) -> Result<()> {
        let noise = self.individuals.iter().filter(|i| i.is_noise).count();
        if noise != 1 {
            return Err(CoreError::InvalidState(format!(
                "catalogue must hold exactly one noise individual, found {noise}"
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for ind in &self.individuals {
            if !ids.insert(ind.id.as_str()) {
                return Err(CoreError::InvalidState(format!(
                    "duplicate individual id {}",
                    ind.id
                )));
            }
            if let Some(p) = &ind.prototype {
                if p.values.len() != self.dimension {
                    return Err(CoreError::EmbeddingDimension {
                        expected: self.dimension,
                        found: p.values.len(),
                    });
                }
            }
            for e in &ind.embeddings {
                e.check_dim(self.dimension)?;
            }
        }
        Ok(())
    }
}
