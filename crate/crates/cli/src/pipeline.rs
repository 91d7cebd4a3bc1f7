//! Glue between detection ingestion, mask post-processing, the embedder and
//! the catalogue store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use finpipe_core::detection::{load_detections, DetectionConfig, DetectorBackend};
use finpipe_core::maskproc::{postprocess_detection, PostprocessParams};
use finpipe_core::matcher::rank;
use finpipe_core::{Catalogue, CoreError, EmbeddingVector, Individual, MatchResult, RoiRecord, RoiState, Store};
use finpipe_embedder::Network;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Oracle,
    ResultsFile,
}

impl DetectorKind {
    pub fn backend(self) -> DetectorBackend {
        match self {
            DetectorKind::Oracle => DetectorBackend::OracleAnnotations,
            DetectorKind::ResultsFile => DetectorBackend::ResultsFile,
        }
    }
}

/// Where the detections for an image come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Annotation or results file (line-oriented JSON).
    pub source: PathBuf,
    #[serde(default)]
    pub min_confidence: Option<f64>,
    /// Image id used inside `source`; defaults to the store image id.
    #[serde(default)]
    pub image_key: Option<String>,
    #[serde(default)]
    pub postprocess: Option<PostprocessParams>,
}

pub fn detection_config(kind: DetectorKind, min_confidence: Option<f64>) -> DetectionConfig {
    let defaults = DetectionConfig::default();
    DetectionConfig {
        min_confidence: min_confidence.unwrap_or(defaults.min_confidence),
        backend: kind.backend(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedRoi {
    pub roi_id: String,
    pub crop_path: String,
    /// Present when a model embedded and ranked the crop.
    pub match_result: Option<MatchResult>,
}

/// Ranks against every prototyped individual; with none, the result is empty
/// and novel.
pub fn rank_or_empty(query: &EmbeddingVector, catalogue: &Catalogue) -> Result<MatchResult> {
    let any = catalogue.individuals.iter().any(|i| {
        i.prototype.is_some() && (!i.is_noise || catalogue.matcher_config.include_noise_in_ranking)
    });
    if !any {
        query.check_dim(catalogue.dimension)?;
        return Ok(MatchResult {
            ranked: Vec::new(),
            novel: true,
            threshold_used: catalogue.matcher_config.novelty_threshold,
        });
    }
    Ok(rank(query, catalogue)?)
}

pub struct Pipeline {
    store: Store,
    model: Option<Network>,
    pub postprocess: PostprocessParams,
}

impl Pipeline {
    pub fn new(store: Store, model: Option<Network>, postprocess: PostprocessParams) -> Result<Self> {
        if let Some(m) = &model {
            let dim = store.snapshot().dimension;
            if m.config.embedding_dim != dim {
                return Err(AppError::Config(format!(
                    "model embeds into {} dimensions but the catalogue holds {dim}",
                    m.config.embedding_dim
                )));
            }
        }
        postprocess.se.validate()?;
        postprocess.threshold.validate()?;
        Ok(Pipeline { store, model, postprocess })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn model(&self) -> Result<&Network> {
        self.model.as_ref().ok_or(AppError::ModelUnavailable)
    }

    pub fn embed(&self, crop: &RgbImage) -> Result<EmbeddingVector> {
        Ok(self.model()?.embed(crop))
    }

    pub fn match_crop(&self, crop: &RgbImage) -> Result<MatchResult> {
        let e = self.embed(crop)?;
        rank_or_empty(&e, &self.store.snapshot())
    }

    /// Detection ingestion, post-processing and, with a model, embedding,
    /// ranking and queueing for review. Each surviving mask component
    /// becomes one RoI.
    pub fn process_image(&self, image_id: &str, kind: DetectorKind, params: &DetectionParams) -> Result<Vec<ProcessedRoi>> {
        let snap = self.store.snapshot();
        let record = snap
            .images
            .get(image_id)
            .ok_or_else(|| CoreError::not_found("image", image_id))?;
        let image = self.store.load_image(image_id)?;
        let key = params.image_key.clone().unwrap_or_else(|| image_id.to_string());
        let dims = HashMap::from([(key.clone(), (record.width_px as usize, record.height_px as usize))]);
        let cfg = detection_config(kind, params.min_confidence);
        let detections: Vec<RoiRecord> = load_detections(&params.source, &cfg, None)?
            .into_iter()
            .filter(|r| r.image_id == key)
            .collect();
        for d in &detections {
            if d.mask.dims() != dims[&key] {
                return Err(CoreError::DimensionMismatch { expected: dims[&key], found: d.mask.dims() }.into());
            }
        }
        let pp = params.postprocess.unwrap_or(self.postprocess);
        let mut out = Vec::new();
        for (n, det) in detections.iter().enumerate() {
            let crops = postprocess_detection(&image, &det.mask, &pp)?;
            for (j, c) in crops.into_iter().enumerate() {
                let id = if j == 0 { format!("{image_id}_r{n}") } else { format!("{image_id}_r{n}c{j}") };
                let mut roi = RoiRecord::new(&id, image_id, c.component, det.confidence, &det.class_label, &det.provenance)?;
                roi.advance(RoiState::Postprocessed)?;
                self.store.put_roi(roi)?;
                let match_result = match &self.model {
                    Some(model) => {
                        let e = model.embed(&c.crop);
                        let result = rank_or_empty(&e, &self.store.snapshot())?;
                        self.store.submit_for_review(&id, &c.crop, e, result.clone())?;
                        Some(result)
                    }
                    None => {
                        let path = self.store.crop_path(&id);
                        c.crop.save(&path)?;
                        None
                    }
                };
                out.push(ProcessedRoi { roi_id: id.clone(), crop_path: format!("rois/{id}.crop.png"), match_result });
            }
        }
        Ok(out)
    }

    /// Current ranking of a processed RoI, truncated to `n`.
    pub fn roi_matches(&self, roi_id: &str, n: usize) -> Result<MatchResult> {
        let snap = self.store.snapshot();
        if !snap.rois.contains_key(roi_id) {
            return Err(CoreError::not_found("RoI", roi_id).into());
        }
        if let Some(e) = snap.roi_embeddings.get(roi_id) {
            return Ok(rank_or_empty(e, &snap)?.truncated(n));
        }
        match snap.review(roi_id) {
            Some(item) => Ok(item.match_result.truncated(n)),
            None if self.model.is_none() => Err(AppError::ModelUnavailable),
            None => Err(AppError::Data(format!("RoI {roi_id} has not been embedded"))),
        }
    }

    /// Adds an individual from labelled crops without touching the model.
    pub fn enroll(&self, label: &str, crops: &[RgbImage]) -> Result<Individual> {
        let model = self.model()?;
        let embeddings = crops.iter().map(|c| model.embed(c)).collect();
        Ok(self.store.append_individual(label, embeddings)?)
    }
}

// --------------------------------------------------------------- crop sets

/// Directory of labelled crops: `crops/<id>.png` plus `labels.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub items: Vec<CropItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropItem {
    pub id: String,
    pub label: Option<String>,
    pub image: RgbImage,
}

impl CropSet {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let crops = dir.join("crops");
        fs::create_dir_all(&crops).map_err(AppError::io(&crops))?;
        let mut labels = BTreeMap::new();
        for it in &self.items {
            it.image.save(crops.join(format!("{}.png", it.id)))?;
            if let Some(l) = &it.label {
                labels.insert(it.id.clone(), l.clone());
            }
        }
        let lp = dir.join("labels.json");
        fs::write(&lp, serde_json::to_vec_pretty(&labels)?).map_err(AppError::io(&lp))
    }

    /// Reads every PNG under `crops/`, sorted by id.
    pub fn read(dir: &Path) -> Result<CropSet> {
        let crops = dir.join("crops");
        let lp = dir.join("labels.json");
        let labels: BTreeMap<String, String> = if lp.exists() {
            serde_json::from_slice(&fs::read(&lp).map_err(AppError::io(&lp))?)?
        } else {
            BTreeMap::new()
        };
        let mut ids: Vec<String> = fs::read_dir(&crops)
            .map_err(AppError::io(&crops))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("png"))
                    .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                    .flatten()
            })
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(AppError::Data(format!("no crops under {}", crops.display())));
        }
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let p = crops.join(format!("{id}.png"));
            let image = image::open(&p)?.to_rgb8();
            items.push(CropItem { label: labels.get(&id).cloned(), id, image });
        }
        Ok(CropSet { items })
    }

    pub fn labelled(&self) -> Result<(Vec<RgbImage>, Vec<String>)> {
        let mut images = Vec::with_capacity(self.items.len());
        let mut labels = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let l = it
                .label
                .clone()
                .ok_or_else(|| AppError::Data(format!("crop {} has no label", it.id)))?;
            images.push(it.image.clone());
            labels.push(l);
        }
        Ok((images, labels))
    }
}

/// Summary of a batch `process` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub detections: usize,
    pub crops: usize,
    pub skipped_images: Vec<String>,
}

/// Batch mode: every detection in `source` whose image exists as
/// `<images>/<image_id>.png` is post-processed into crops; RoI records and
/// crops go under `out`.
pub fn process_batch(
    images_dir: &Path,
    source: &Path,
    cfg: &DetectionConfig,
    params: &PostprocessParams,
    image_labels: &BTreeMap<String, String>,
    out: &Path,
) -> Result<(CropSet, BatchSummary)> {
    let detections = load_detections(source, cfg, None)?;
    let mut by_image: BTreeMap<&str, Vec<&RoiRecord>> = BTreeMap::new();
    for d in &detections {
        by_image.entry(&d.image_id).or_default().push(d);
    }
    let rois_dir = out.join("rois");
    fs::create_dir_all(&rois_dir).map_err(AppError::io(&rois_dir))?;
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (image_id, dets) in by_image {
        let path = images_dir.join(format!("{image_id}.png"));
        if !path.exists() {
            log::warn!("no image file for detections of {image_id}");
            skipped.push(image_id.to_string());
            continue;
        }
        let image = image::open(&path)?.to_rgb8();
        for det in dets {
            if det.mask.dims() != (image.width() as usize, image.height() as usize) {
                return Err(CoreError::DimensionMismatch {
                    expected: (image.width() as usize, image.height() as usize),
                    found: det.mask.dims(),
                }
                .into());
            }
            for (j, c) in postprocess_detection(&image, &det.mask, params)?.into_iter().enumerate() {
                let id = if j == 0 { det.id.clone() } else { format!("{}c{j}", det.id) };
                let mut roi = RoiRecord::new(&id, image_id, c.component, det.confidence, &det.class_label, &det.provenance)?;
                roi.advance(RoiState::Postprocessed)?;
                let rp = rois_dir.join(format!("{id}.json"));
                fs::write(&rp, serde_json::to_vec(&roi)?).map_err(AppError::io(&rp))?;
                items.push(CropItem { id, label: image_labels.get(image_id).cloned(), image: c.crop });
            }
        }
    }
    let set = CropSet { items };
    set.write(out)?;
    let summary = BatchSummary { detections: detections.len(), crops: set.items.len(), skipped_images: skipped };
    Ok((set, summary))
}
