//! Detector output ingestion and mask mAP evaluation.
//!
//! Detections and annotations share one line-oriented JSON schema, one
//! object per line:
//!
//! ```json
//! {"image_id": "img-1", "category": "dolphin", "score": 0.97,
//!  "mask": {"size": [h, w], "counts": "..."}, "bbox": [x, y, w, h]}
//! ```
//!
//! `mask` may instead be a path to a PNG, relative to the file. Annotation
//! files omit `score`. The mask is authoritative: the record's box is
//! recomputed as its tight box.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalogue::RoiRecord;
use crate::error::{CoreError, Result};
use crate::mask::{BinaryMask, Rle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorBackend {
    /// Ground-truth annotations replayed as detections with confidence 1.
    OracleAnnotations,
    /// A detector's results file.
    ResultsFile,
}

impl DetectorBackend {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorBackend::OracleAnnotations => "oracle_annotations",
            DetectorBackend::ResultsFile => "results_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub min_confidence: f64,
    pub backend: DetectorBackend,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            min_confidence: 0.9,
            backend: DetectorBackend::ResultsFile,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(CoreError::InvalidConfig(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

/// Mask payload of a detection line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    Rle(Rle),
    Png(String),
}

/// One line of a detection results or annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub image_id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub mask: MaskSource,
    pub bbox: [f64; 4],
}

impl DetectionLine {
    pub fn from_mask(image_id: &str, category: &str, score: Option<f64>, mask: &BinaryMask) -> Self {
        let bbox = mask
            .bbox()
            .map(|b| [b.x as f64, b.y as f64, b.w as f64, b.h as f64])
            .unwrap_or([0.0; 4]);
        DetectionLine {
            image_id: image_id.to_string(),
            category: category.to_string(),
            score,
            mask: MaskSource::Rle(mask.to_rle()),
            bbox,
        }
    }
}

/// Writes lines in the documented schema.
pub fn write_detection_lines(path: &Path, lines: &[DetectionLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn schema_err(line: usize, field: &str, message: impl Into<String>) -> CoreError {
    CoreError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses detection lines from text; `base_dir` resolves PNG mask paths.
/// Returns `(line number, line, decoded mask)`.
pub fn parse_detection_lines(
    text: &str,
    base_dir: &Path,
    require_score: bool,
) -> Result<Vec<(usize, DetectionLine, BinaryMask)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw)
            .map_err(|e| schema_err(line_no, "<line>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema_err(line_no, "<line>", "expected a JSON object"))?;
        for field in ["image_id", "category", "mask", "bbox"] {
            if !obj.contains_key(field) {
                return Err(schema_err(line_no, field, "missing"));
            }
        }
        if require_score && !obj.contains_key("score") {
            return Err(schema_err(line_no, "score", "missing"));
        }
        let line: DetectionLine = serde_json::from_value(value.clone()).map_err(|e| {
            let field = ["image_id", "category", "score", "mask", "bbox"]
                .into_iter()
                .find(|f| e.to_string().contains(f))
                .unwrap_or("<line>");
            schema_err(line_no, field, e.to_string())
        })?;
        if let Some(s) = line.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(schema_err(line_no, "score", format!("{s} outside [0, 1]")));
            }
        }
        if line.bbox.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(schema_err(line_no, "bbox", "entries must be finite and non-negative"));
        }
        let mask = match &line.mask {
            MaskSource::Rle(rle) => {
                BinaryMask::from_rle(rle).map_err(|e| schema_err(line_no, "mask", e.to_string()))?
            }
            MaskSource::Png(p) => {
                let path: PathBuf = base_dir.join(p);
                BinaryMask::read_png(&path).map_err(|e| schema_err(line_no, "mask", e.to_string()))?
            }
        };
        out.push((line_no, line, mask));
    }
    Ok(out)
}

fn read_source(path: &Path) -> Result<(String, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, base))
}

fn to_records(
    parsed: Vec<(usize, DetectionLine, BinaryMask)>,
    image_dims: Option<&HashMap<String, (usize, usize)>>,
    min_confidence: f64,
    force_confidence: Option<f64>,
    provenance: &str,
) -> Result<Vec<RoiRecord>> {
    let mut per_image: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (line_no, line, mask) in parsed {
        if let Some(dims) = image_dims {
            let expected = dims
                .get(&line.image_id)
                .ok_or_else(|| schema_err(line_no, "image_id", format!("unknown image {}", line.image_id)))?;
            if *expected != mask.dims() {
                return Err(CoreError::DimensionMismatch {
                    expected: *expected,
                    found: mask.dims(),
                });
            }
        }
        let confidence = force_confidence.or(line.score).unwrap_or(1.0);
        let n = per_image.entry(line.image_id.clone()).or_insert(0);
        let id = format!("{}_r{}", line.image_id, *n);
        *n += 1;
        if confidence < min_confidence {
            continue;
        }
        if mask.is_empty() {
            log::warn!("line {line_no}: detection on {} has an empty mask, skipped", line.image_id);
            continue;
        }
        out.push(RoiRecord::new(
            id,
            line.image_id,
            mask,
            confidence,
            line.category,
            provenance,
        )?);
    }
    Ok(out)
}

/// Replays an annotation file as detections with confidence 1.
pub fn oracle_detector(annotation_file: &Path) -> Result<Vec<RoiRecord>> {
    let (text, base) = read_source(annotation_file)?;
    oracle_detector_from_str(&text, &base)
}

pub fn oracle_detector_from_str(text: &str, base_dir: &Path) -> Result<Vec<RoiRecord>> {
    let parsed = parse_detection_lines(text, base_dir, false)?;
    to_records(
        parsed,
        None,
        0.0,
        Some(1.0),
        DetectorBackend::OracleAnnotations.name(),
    )
}

/// Loads detections through the configured backend, keeping those at or
/// above `min_confidence`. When `image_dims` is given every mask must match
/// its image.
pub fn load_detections(
    source: &Path,
    cfg: &DetectionConfig,
    image_dims: Option<&HashMap<String, (usize, usize)>>,
) -> Result<Vec<RoiRecord>> {
    cfg.validate()?;
    let (text, base) = read_source(source)?;
    load_detections_from_str(&text, &base, cfg, image_dims)
}

pub fn load_detections_from_str(
    text: &str,
    base_dir: &Path,
    cfg: &DetectionConfig,
    image_dims: Option<&HashMap<String, (usize, usize)>>,
) -> Result<Vec<RoiRecord>> {
    cfg.validate()?;
    match cfg.backend {
        DetectorBackend::OracleAnnotations => {
            let parsed = parse_detection_lines(text, base_dir, false)?;
            to_records(parsed, image_dims, cfg.min_confidence, Some(1.0), cfg.backend.name())
        }
        DetectorBackend::ResultsFile => {
            let parsed = parse_detection_lines(text, base_dir, true)?;
            to_records(parsed, image_dims, cfg.min_confidence, None, cfg.backend.name())
        }
    }
}

// ------------------------------------------------------------------ metrics

/// Intersection over union; 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouThresholdGrid {
    pub thresholds: Vec<f64>,
}

impl Default for IouThresholdGrid {
    /// 0.50, 0.55, ..., 0.95.
    fn default() -> Self {
        IouThresholdGrid {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

impl IouThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        let grid = IouThresholdGrid { thresholds };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(CoreError::EmptyInput("IoU thresholds"));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CoreError::InvalidConfig(
                "IoU thresholds must lie in (0, 1] and be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

const RECALL_POINTS: usize = 101;

/// Precomputed pairwise IoUs for one class, grouped per image.
struct ClassEval {
    /// Per image: prediction scores (descending) and the IoU row of each
    /// prediction against that image's ground truths.
    images: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    num_gt: usize,
    num_pred: usize,
}

impl ClassEval {
    fn new(preds: &[&RoiRecord], gts: &[&RoiRecord]) -> Result<Self> {
        let mut by_image: BTreeMap<&str, (Vec<&RoiRecord>, Vec<&RoiRecord>)> = BTreeMap::new();
        for p in preds {
            by_image.entry(&p.image_id).or_default().0.push(p);
        }
        for g in gts {
            by_image.entry(&g.image_id).or_default().1.push(g);
        }
        let mut images = Vec::with_capacity(by_image.len());
        for (_, (mut ps, gs)) in by_image {
            // Stable: equal scores keep input order.
            ps.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let mut rows = Vec::with_capacity(ps.len());
            for p in &ps {
                rows.push(
                    gs.iter()
                        .map(|g| mask_iou(&p.mask, &g.mask))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            images.push((ps.iter().map(|p| p.confidence).collect(), rows));
        }
        Ok(ClassEval {
            images,
            num_gt: gts.len(),
            num_pred: preds.len(),
        })
    }

    fn average_precision(&self, iou_thr: f64) -> Option<f64> {
        if self.num_gt == 0 {
            return (self.num_pred > 0).then_some(0.0);
        }
        // Greedy per-image matching: highest score first, each ground truth
        // at most once, best IoU among the still-unmatched ones.
        let mut scored: Vec<(f64, bool)> = Vec::with_capacity(self.num_pred);
        for (scores, rows) in &self.images {
            let n_gt = rows.first().map_or(0, |r| r.len());
            let mut taken = vec![false; n_gt];
            for (score, row) in scores.iter().zip(rows) {
                let mut best: Option<(usize, f64)> = None;
                for (g, &iou) in row.iter().enumerate() {
                    if taken[g] || iou < iou_thr {
                        continue;
                    }
                    if best.map_or(true, |(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                }
                scored.push((*score, best.is_some()));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut recall = Vec::with_capacity(scored.len());
        let mut precision = Vec::with_capacity(scored.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, hit) in &scored {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / self.num_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        // Precision envelope: best precision at any recall to the right.
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let sum: f64 = (0..RECALL_POINTS)
            .map(|i| {
                let r = i as f64 / (RECALL_POINTS - 1) as f64;
                let k = recall.partition_point(|&x| x < r);
                precision.get(k).copied().unwrap_or(0.0)
            })
            .sum();
        Some(sum / RECALL_POINTS as f64)
    }
}

/// 101-point interpolated average precision of `preds` against `gts` at one
/// IoU threshold, all records treated as one class. `None` when there is
/// nothing to evaluate (no ground truths and no predictions).
pub fn average_precision(preds: &[RoiRecord], gts: &[RoiRecord], iou_thr: f64) -> Result<Option<f64>> {
    let p: Vec<&RoiRecord> = preds.iter().collect();
    let g: Vec<&RoiRecord> = gts.iter().collect();
    Ok(ClassEval::new(&p, &g)?.average_precision(iou_thr))
}

/// mAP per IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub dataset: String,
    pub classes: Vec<String>,
    /// `(threshold, mAP)`; `None` when every class was undefined.
    pub rows: Vec<(f64, Option<f64>)>,
}

impl MapReport {
    pub fn value_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .and_then(|(_, v)| *v)
    }

    /// Plain-text table with one column per threshold.
    pub fn to_table(&self) -> String {
        let mut header = String::from("Dataset");
        let mut row = self.dataset.clone();
        for (t, v) in &self.rows {
            header.push_str(&format!(" | mAP@IOU[{t:.2}]"));
            match v {
                Some(v) => row.push_str(&format!(" | {v:>13.4}")),
                None => row.push_str(&format!(" | {:>13}", "n/a")),
            }
        }
        format!("{header}\n{row}\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,iou_threshold,map\n");
        for (t, v) in &self.rows {
            let v = v.map_or_else(|| "".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{},{t:.2},{v}\n", self.dataset));
        }
        out
    }
}

/// Mean over classes of the per-class AP, at every threshold of `grid`.
/// Classes with neither predictions nor ground truths are left out.
pub fn map_over_thresholds(
    dataset: &str,
    preds: &[RoiRecord],
    gts: &[RoiRecord],
    grid: &IouThresholdGrid,
) -> Result<MapReport> {
    grid.validate()?;
    let mut classes: Vec<String> = preds
        .iter()
        .chain(gts)
        .map(|r| r.class_label.clone())
        .collect();
    classes.sort();
    classes.dedup();
    let evals = classes
        .iter()
        .map(|c| {
            let p: Vec<&RoiRecord> = preds.iter().filter(|r| &r.class_label == c).collect();
            let g: Vec<&RoiRecord> = gts.iter().filter(|r| &r.class_label == c).collect();
            ClassEval::new(&p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = grid
        .thresholds
        .iter()
        .map(|&t| {
            let aps: Vec<f64> = evals.iter().filter_map(|e| e.average_precision(t)).collect();
            let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
            (t, map)
        })
        .collect();
    Ok(MapReport {
        dataset: dataset.to_string(),
        classes,
        rows,
    })
}
