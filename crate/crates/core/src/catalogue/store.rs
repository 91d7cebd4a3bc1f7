//! On-disk catalogue store.
//!
//! ```text
//! <root>/
//!   manifest.json                      catalogue metadata, individuals, prototypes
//!   images/<image_id>.png              survey images
//!   rois/<roi_id>.json                 RoI record (mask as compressed RLE)
//!   rois/<roi_id>.mask.png             the same mask as a 1-bit PNG
//!   rois/<roi_id>.crop.png             background-free crop, once processed
//!   rois/<roi_id>.emb                  single-row embedding file, once embedded
//!   individuals/<id>/embeddings.bin    example embeddings, one row per example
//!   individuals/<id>/<roi_id>.png      crops of the individual's confirmed RoIs
//! ```
//!
//! Mutations are serialised through one writer and published as a new
//! immutable snapshot; readers never wait on a writer's disk I/O. The
//! manifest is written last (via rename), so it is the commit point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::embfile::{read_embeddings, write_embeddings};
use super::{
    timestamp_now, Catalogue, Decision, EmbeddingVector, ImageRecord, Individual, Prototype,
    ReviewItem, ReviewStatus, RoiRecord, RoiState, DEFAULT_DIMENSION,
};
use crate::error::{CoreError, Result};
use crate::matcher::{build_prototype, MatchResult, MatcherConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Settings applied when a store is created; an existing manifest wins.
#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub catalogue_id: String,
    pub dimension: usize,
    pub matcher_config: MatcherConfig,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            catalogue_id: "catalogue".to_string(),
            dimension: DEFAULT_DIMENSION,
            matcher_config: MatcherConfig::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    catalogue_id: String,
    version: u64,
    dimension: usize,
    individuals: Vec<Individual>,
    matcher_config: MatcherConfig,
    #[serde(default)]
    embedder_config_ref: Option<String>,
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    roi_ids: Vec<String>,
    #[serde(default)]
    reviews: Vec<ReviewItem>,
    next_seq: u64,
}

/// Outcome of a reviewer decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub roi_id: String,
    pub individual_id: String,
    pub status: ReviewStatus,
    pub version: u64,
}

/// Handle over a catalogue directory. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    current: RwLock<Arc<Catalogue>>,
    writer: Mutex<()>,
}

pub fn open_store(root: impl AsRef<Path>) -> Result<Store> {
    open_store_with(root, StoreOptions::default())
}

pub fn open_store_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Store> {
    let root = root.as_ref().to_path_buf();
    for dir in ["", "images", "rois", "individuals"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let catalogue = if manifest_path.exists() {
        load_catalogue(&root)?
    } else {
        if options.dimension < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "embedding dimension must be >= 2, got {}",
                options.dimension
            )));
        }
        options.matcher_config.validate()?;
        let cat = Catalogue::empty(options.catalogue_id, options.dimension, options.matcher_config);
        write_manifest(&root, &cat)?;
        cat
    };
    Ok(Store {
        root,
        current: RwLock::new(Arc::new(catalogue)),
        writer: Mutex::new(()),
    })
}

fn safe_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CoreError::InvalidConfig(format!(
            "id `{id}` must be 1-128 characters of [A-Za-z0-9_.-]"
        )))
    }
}

fn load_catalogue(root: &Path) -> Result<Catalogue> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let corrupt = |version_found: String, message: String| CoreError::CorruptManifest {
        path: path.clone(),
        version_found,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt("<unparsed>".into(), e.to_string()))?;
    let version_field = value.get("version").cloned().unwrap_or(serde_json::Value::Null);
    if !version_field.is_u64() {
        return Err(corrupt(
            version_field.to_string(),
            "version must be a non-negative integer".into(),
        ));
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| corrupt(version_field.to_string(), e.to_string()))?;

    let mut individuals = manifest.individuals;
    for ind in &mut individuals {
        let emb_path = root.join("individuals").join(&ind.id).join("embeddings.bin");
        if emb_path.exists() {
            let (dim, rows) = read_embeddings(&emb_path)?;
            if dim != manifest.dimension && !rows.is_empty() {
                return Err(CoreError::EmbeddingDimension {
                    expected: manifest.dimension,
                    found: dim,
                });
            }
            ind.embeddings = rows;
        }
    }
    let mut rois = BTreeMap::new();
    let mut roi_embeddings = BTreeMap::new();
    for id in &manifest.roi_ids {
        let p = root.join("rois").join(format!("{id}.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        let roi: RoiRecord = serde_json::from_str(&text)?;
        let emb = root.join("rois").join(format!("{id}.emb"));
        if emb.exists() {
            let (_, mut rows) = read_embeddings(&emb)?;
            if let Some(e) = rows.pop() {
                roi_embeddings.insert(id.clone(), e);
            }
        }
        rois.insert(id.clone(), roi);
    }
    let cat = Catalogue {
        id: manifest.catalogue_id,
        version: manifest.version,
        dimension: manifest.dimension,
        individuals,
        matcher_config: manifest.matcher_config,
        embedder_config_ref: manifest.embedder_config_ref,
        images: manifest.images.into_iter().map(|i| (i.id.clone(), i)).collect(),
        rois,
        roi_embeddings,
        reviews: manifest.reviews,
        next_seq: manifest.next_seq,
    };
    cat.validate()
        .map_err(|e| corrupt(cat.version.to_string(), e.to_string()))?;
    Ok(cat)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

fn write_manifest(root: &Path, cat: &Catalogue) -> Result<()> {
    let manifest = Manifest {
        catalogue_id: cat.id.clone(),
        version: cat.version,
        dimension: cat.dimension,
        individuals: cat.individuals.clone(),
        matcher_config: cat.matcher_config,
        embedder_config_ref: cat.embedder_config_ref.clone(),
        images: cat.images.values().cloned().collect(),
        roi_ids: cat.rois.keys().cloned().collect(),
        reviews: cat.reviews.clone(),
        next_seq: cat.next_seq,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())
}

fn next_id(cat: &mut Catalogue, prefix: &str) -> String {
    let id = format!("{prefix}-{:06}", cat.next_seq);
    cat.next_seq += 1;
    id
}

fn make_prototype(individual_id: &str, embeddings: &[EmbeddingVector]) -> Result<Prototype> {
    let vector = build_prototype(embeddings)?;
    Ok(Prototype {
        individual_id: individual_id.to_string(),
        values: vector.values,
        normalized: vector.normalized,
        example_count: embeddings.len(),
        created_at: timestamp_now(),
    })
}

impl Store {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Consistent read-only view as of the last completed mutation.
    pub fn snapshot(&self) -> Arc<Catalogue> {
        self.current.read().expect("catalogue lock poisoned").clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    /// Runs `f` against a private copy of the catalogue; on success the copy
    /// gets the next version, the manifest is written, and the copy becomes
    /// the published snapshot.
    fn mutate<T>(&self, f: impl FnOnce(&mut Catalogue, &Path) -> Result<T>) -> Result<T> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next, &self.root)?;
        next.version += 1;
        write_manifest(&self.root, &next)?;
        *self.current.write().expect("catalogue lock poisoned") = Arc::new(next);
        Ok(out)
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Stores an RGB image as PNG and registers it.
    pub fn put_image(
        &self,
        image: &RgbImage,
        survey_meta: BTreeMap<String, String>,
    ) -> Result<ImageRecord> {
        if image.width() == 0 || image.height() == 0 {
            return Err(CoreError::InvalidConfig("image must be at least 1x1".into()));
        }
        self.mutate(|cat, root| {
            let id = next_id(cat, "img");
            let rel = format!("images/{id}.png");
            image.save(root.join(&rel))?;
            let record = ImageRecord {
                id: id.clone(),
                path: rel,
                width_px: image.width(),
                height_px: image.height(),
                survey_meta,
            };
            cat.images.insert(id, record.clone());
            Ok(record)
        })
    }

    pub fn load_image(&self, image_id: &str) -> Result<RgbImage> {
        let snap = self.snapshot();
        let record = snap
            .images
            .get(image_id)
            .ok_or_else(|| CoreError::not_found("image", image_id))?;
        Ok(image::open(self.image_path(record))?.to_rgb8())
    }

    /// Persists an RoI; an empty id is replaced by a generated one.
    pub fn put_roi(&self, roi: RoiRecord) -> Result<String> {
        roi.validate()?;
        self.mutate(|cat, root| {
            let image = cat
                .images
                .get(&roi.image_id)
                .ok_or_else(|| CoreError::not_found("image", &roi.image_id))?;
            let dims = (image.width_px as usize, image.height_px as usize);
            if dims != roi.mask.dims() {
                return Err(CoreError::DimensionMismatch {
                    expected: dims,
                    found: roi.mask.dims(),
                });
            }
            let mut roi = roi;
            if roi.id.is_empty() {
                roi.id = next_id(cat, "roi");
            }
            safe_id(&roi.id)?;
            if cat.rois.contains_key(&roi.id) {
                return Err(CoreError::Conflict(format!("RoI {} already stored", roi.id)));
            }
            let dir = root.join("rois");
            let json = serde_json::to_string(&roi)?;
            write_atomic(&dir.join(format!("{}.json", roi.id)), json.as_bytes())?;
            roi.mask.write_png(&dir.join(format!("{}.mask.png", roi.id)))?;
            let id = roi.id.clone();
            cat.rois.insert(id.clone(), roi);
            Ok(id)
        })
    }

    pub fn get_roi(&self, roi_id: &str) -> Result<RoiRecord> {
        self.snapshot()
            .rois
            .get(roi_id)
            .cloned()
            .ok_or_else(|| CoreError::not_found("RoI", roi_id))
    }

    pub fn crop_path(&self, roi_id: &str) -> PathBuf {
        self.root.join("rois").join(format!("{roi_id}.crop.png"))
    }

    /// Records the crop and embedding of a processed RoI together with its
    /// ranking, and queues it for review.
    pub fn submit_for_review(
        &self,
        roi_id: &str,
        crop: &RgbImage,
        embedding: EmbeddingVector,
        match_result: MatchResult,
    ) -> Result<ReviewItem> {
        self.mutate(|cat, root| {
            embedding.check_dim(cat.dimension)?;
            if cat.review(roi_id).is_some() {
                return Err(CoreError::Conflict(format!("RoI {roi_id} already queued")));
            }
            let roi = cat
                .rois
                .get_mut(roi_id)
                .ok_or_else(|| CoreError::not_found("RoI", roi_id))?;
            roi.advance(RoiState::Embedded)?;
            let json = serde_json::to_string(&*roi)?;
            let dir = root.join("rois");
            write_atomic(&dir.join(format!("{roi_id}.json")), json.as_bytes())?;
            let crop_rel = format!("rois/{roi_id}.crop.png");
            crop.save(root.join(&crop_rel))?;
            write_embeddings(
                &dir.join(format!("{roi_id}.emb")),
                cat.dimension,
                std::slice::from_ref(&embedding),
            )?;
            cat.roi_embeddings.insert(roi_id.to_string(), embedding);
            let item = ReviewItem {
                roi_id: roi_id.to_string(),
                crop_path: crop_rel,
                match_result,
                status: ReviewStatus::Pending,
                seq: cat.next_seq,
                resolved_individual: None,
            };
            cat.next_seq += 1;
            cat.reviews.push(item.clone());
            Ok(item)
        })
    }

    /// Adds a new individual whose prototype is the median of `embeddings`.
    /// Embedder weights are never touched.
    pub fn append_individual(&self, label: &str, embeddings: Vec<EmbeddingVector>) -> Result<Individual> {
        self.mutate(|cat, root| insert_individual(cat, root, label, embeddings, Vec::new()))
    }

    pub fn set_matcher_config(&self, config: MatcherConfig) -> Result<()> {
        config.validate()?;
        self.mutate(|cat, _| {
            cat.matcher_config = config;
            Ok(())
        })
    }

    pub fn set_embedder_ref(&self, reference: &str) -> Result<()> {
        self.mutate(|cat, _| {
            cat.embedder_config_ref = Some(reference.to_string());
            Ok(())
        })
    }

    /// Applies a reviewer decision: the RoI's embedding joins the chosen (or
    /// a new, or the noise) individual, whose prototype is recomputed over
    /// all of its examples. A second decision on the same item conflicts.
    pub fn apply_decision(&self, roi_id: &str, decision: &Decision) -> Result<DecisionOutcome> {
        self.mutate(|cat, root| {
            let item_idx = cat
                .reviews
                .iter()
                .position(|r| r.roi_id == roi_id)
                .ok_or_else(|| CoreError::not_found("review item", roi_id))?;
            if cat.reviews[item_idx].status != ReviewStatus::Pending {
                return Err(CoreError::Conflict(format!(
                    "review item {roi_id} already decided ({:?})",
                    cat.reviews[item_idx].status
                )));
            }
            let embedding = cat
                .roi_embeddings
                .get(roi_id)
                .cloned()
                .ok_or_else(|| CoreError::InvalidState(format!("RoI {roi_id} has no embedding")))?;
            let (individual_id, status) = match decision {
                Decision::Match { individual_id } => {
                    attach_example(cat, root, individual_id, roi_id, embedding)?;
                    (individual_id.clone(), ReviewStatus::ConfirmedMatch)
                }
                Decision::NewIndividual { label } => {
                    let ind = insert_individual(
                        cat,
                        root,
                        label,
                        vec![embedding],
                        vec![roi_id.to_string()],
                    )?;
                    (ind.id, ReviewStatus::ConfirmedNew)
                }
                Decision::Noise => {
                    let noise = cat.noise_individual().id.clone();
                    attach_example(cat, root, &noise, roi_id, embedding)?;
                    (noise, ReviewStatus::MarkedNoise)
                }
            };
            copy_crop(root, &individual_id, roi_id)?;
            if let Some(roi) = cat.rois.get_mut(roi_id) {
                roi.advance(RoiState::Reviewed)?;
                let json = serde_json::to_string(&*roi)?;
                write_atomic(&root.join("rois").join(format!("{roi_id}.json")), json.as_bytes())?;
            }
            let item = &mut cat.reviews[item_idx];
            item.status = status;
            item.resolved_individual = Some(individual_id.clone());
            Ok(DecisionOutcome {
                roi_id: roi_id.to_string(),
                individual_id,
                status,
                version: cat.version + 1,
            })
        })
    }
}

fn individual_dir(root: &Path, id: &str) -> Result<PathBuf> {
    let dir = root.join("individuals").join(id);
    std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    Ok(dir)
}

fn copy_crop(root: &Path, individual_id: &str, roi_id: &str) -> Result<()> {
    let src = root.join("rois").join(format!("{roi_id}.crop.png"));
    if src.exists() {
        let dst = individual_dir(root, individual_id)?.join(format!("{roi_id}.png"));
        std::fs::copy(&src, &dst).map_err(|e| CoreError::io(&dst, e))?;
    }
    Ok(())
}

fn insert_individual(
    cat: &mut Catalogue,
    root: &Path,
    label: &str,
    embeddings: Vec<EmbeddingVector>,
    roi_ids: Vec<String>,
) -> Result<Individual> {
    if embeddings.is_empty() {
        return Err(CoreError::EmptyInput("individual embeddings"));
    }
    for e in &embeddings {
        e.check_dim(cat.dimension)?;
    }
    if cat.individuals.iter().any(|i| i.label == label) {
        log::warn!("label `{label}` is already used by another individual");
    }
    let id = next_id(cat, "ind");
    let prototype = make_prototype(&id, &embeddings)?;
    let dir = individual_dir(root, &id)?;
    write_embeddings(&dir.join("embeddings.bin"), cat.dimension, &embeddings)?;
    let individual = Individual {
        id,
        label: label.to_string(),
        is_noise: false,
        roi_ids,
        prototype: Some(prototype),
        embeddings,
    };
    cat.individuals.push(individual.clone());
    Ok(individual)
}

fn attach_example(
    cat: &mut Catalogue,
    root: &Path,
    individual_id: &str,
    roi_id: &str,
    embedding: EmbeddingVector,
) -> Result<()> {
    let dimension = cat.dimension;
    let ind = cat
        .individual_mut(individual_id)
        .ok_or_else(|| CoreError::not_found("individual", individual_id))?;
    ind.roi_ids.push(roi_id.to_string());
    ind.embeddings.push(embedding);
    ind.prototype = Some(make_prototype(&ind.id, &ind.embeddings)?);
    let dir = individual_dir(root, &ind.id)?;
    write_embeddings(&dir.join("embeddings.bin"), dimension, &ind.embeddings)
}
