//! Core of the dorsal-fin photo-identification pipeline.
//!
//! * [`mask`]: binary masks and their RLE / PNG exchange formats.
//! * [`maskproc`]: hole closing, component splitting, colour filtering,
//!   background removal, cropping, and threshold calibration.
//! * [`detection`]: detector output ingestion and mask mAP evaluation.
//! * [`matcher`]: median prototypes, Euclidean ranking, novelty flagging.
//! * [`catalogue`]: domain types and the on-disk catalogue store.

pub mod catalogue;
pub mod detection;
pub mod error;
pub mod mask;
pub mod maskproc;
pub mod matcher;

pub use catalogue::{
    open_store, open_store_with, Catalogue, Decision, EmbeddingVector, ImageRecord, Individual,
    Prototype, ReviewItem, ReviewStatus, RoiRecord, RoiState, Store, StoreOptions,
};
pub use error::{CoreError, Result};
pub use mask::{BBox, BinaryMask, Rle};
pub use matcher::{MatchResult, MatcherConfig, RankedMatch};
