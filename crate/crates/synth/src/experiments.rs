//! Experiment runners: top-N matching accuracy per augmentation strategy,
//! colour-threshold calibration study, and the background-leakage study.

use std::collections::BTreeMap;

use finpipe_core::maskproc::{
    accumulate_histograms, apply_mask, crop_bounds, dark_fraction, postprocess_detection, CalibrationReport,
    ChannelHistograms, ColourThreshold, PostprocessParams,
};
use finpipe_core::matcher::{build_prototype, rank_prototypes, top_n_accuracy, PrototypeRef};
use finpipe_core::{BBox, BinaryMask, EmbeddingVector, MatchResult, MatcherConfig};
use finpipe_embedder::{train, AugmentStrategy, BackboneConfig, Network, TrainConfig};
use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::generate::{Dataset, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessParams,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            postprocess: PostprocessParams::default(),
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Sample indices of a per-individual stratified split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each individual's samples with `seed` and sends
/// `round(fraction * n)` of them (at least one, and leaving at least one) to
/// training.
pub fn split_dataset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    let labels: Vec<&str> = dataset.samples.iter().map(|s| s.label.as_str()).collect();
    split_labels(&labels, fraction, seed)
}

/// [`split_dataset`] over a bare label list.
pub fn split_labels<L: AsRef<str>>(labels: &[L], fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::Config(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_ref()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut members) in groups {
        if members.len() < 2 {
            return Err(SynthError::Data(format!("individual {label} has fewer than two samples")));
        }
        members.shuffle(&mut rng);
        let n_train = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Background-free crop of the largest surviving mask component.
pub fn fin_crop(sample: &Sample, params: &PostprocessParams) -> Result<RgbImage> {
    let crops = postprocess_detection(&sample.image, &sample.mask, params)?;
    crops
        .into_iter()
        .next()
        .map(|c| c.crop)
        .ok_or_else(|| SynthError::Data(format!("sample {} has an empty mask", sample.id)))
}

fn crop(image: &RgbImage, b: BBox) -> RgbImage {
    imageops::crop_imm(image, b.x, b.y, b.w, b.h).to_image()
}

/// Raw image inside the padded bounding box of the fin.
pub fn bbox_crop(sample: &Sample, pad_px: u32) -> Result<RgbImage> {
    Ok(crop(&sample.image, crop_bounds(&sample.mask, pad_px)?))
}

/// Fin-only, background-only and bounding-box crops over the same box.
pub struct CropTriple {
    pub bbox: RgbImage,
    pub fin: RgbImage,
    pub background: RgbImage,
    /// Box region minus the fin.
    pub background_mask: BinaryMask,
}

pub fn crop_triple(sample: &Sample, pad_px: u32) -> Result<CropTriple> {
    let bounds = crop_bounds(&sample.mask, pad_px)?;
    let (w, h) = sample.mask.dims();
    let background_mask = BinaryMask::from_bbox(w, h, bounds).and(&sample.mask.complement())?;
    Ok(CropTriple {
        bbox: crop(&sample.image, bounds),
        fin: crop(&apply_mask(&sample.image, &sample.mask)?, bounds),
        background: crop(&apply_mask(&sample.image, &background_mask)?, bounds),
        background_mask,
    })
}

/// Median prototype per label.
pub fn prototypes(embeddings: &[EmbeddingVector], labels: &[&str]) -> Result<BTreeMap<String, EmbeddingVector>> {
    let mut groups: BTreeMap<String, Vec<EmbeddingVector>> = BTreeMap::new();
    for (e, l) in embeddings.iter().zip(labels) {
        groups.entry(l.to_string()).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(l, es)| Ok((l, build_prototype(&es)?)))
        .collect()
}

pub fn rank_against(
    queries: &[EmbeddingVector],
    protos: &BTreeMap<String, EmbeddingVector>,
    config: &MatcherConfig,
) -> Result<Vec<MatchResult>> {
    let refs: Vec<PrototypeRef<'_>> = protos
        .iter()
        .map(|(l, p)| PrototypeRef { individual_id: l, label: l, is_noise: false, vector: &p.values })
        .collect();
    Ok(queries
        .iter()
        .map(|q| rank_prototypes(q, &refs, config))
        .collect::<finpipe_core::Result<_>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopN {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

/// Builds prototypes from the training embeddings and scores the test ones.
pub fn evaluate_topn(
    train_embeddings: &[EmbeddingVector],
    train_labels: &[&str],
    test_embeddings: &[EmbeddingVector],
    test_labels: &[&str],
) -> Result<TopN> {
    let protos = prototypes(train_embeddings, train_labels)?;
    let results = rank_against(test_embeddings, &protos, &MatcherConfig::default())?;
    let truths: Vec<String> = test_labels.iter().map(|s| s.to_string()).collect();
    Ok(TopN {
        top1: top_n_accuracy(&results, &truths, 1)?,
        top5: top_n_accuracy(&results, &truths, 5)?,
        top10: top_n_accuracy(&results, &truths, 10)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNRow {
    pub strategy: AugmentStrategy,
    pub top10: f64,
    pub top5: f64,
    pub top1: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNReport {
    pub dataset: String,
    pub train_size: usize,
    pub test_size: usize,
    pub rows: Vec<TopNRow>,
}

impl TopNReport {
    /// Markdown table: one row per strategy, Top-10/5/1 columns.
    pub fn to_table(&self) -> String {
        let d = &self.dataset;
        let mut out = format!("| Augmentation | {d} Top-10 | {d} Top-5 | {d} Top-1 |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} |\n",
                r.strategy.display_name(),
                r.top10,
                r.top5,
                r.top1
            ));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "strategy", "top10", "top5", "top1"])
            .map_err(|e| SynthError::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                self.dataset.clone(),
                r.strategy.display_name().to_string(),
                format!("{:.4}", r.top10),
                format!("{:.4}", r.top5),
                format!("{:.4}", r.top1),
            ])
            .map_err(|e| SynthError::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| SynthError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fin_crops(dataset: &Dataset, idx: &[usize], params: &PostprocessParams) -> Result<Vec<RgbImage>> {
    idx.iter().map(|&i| fin_crop(&dataset.samples[i], params)).collect()
}

fn labels_of<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a str> {
    idx.iter().map(|&i| dataset.samples[i].label.as_str()).collect()
}

/// Trains on `train_crops` and reports top-N on `test_crops`.
fn train_and_score(
    train_crops: &[RgbImage],
    train_labels: &[&str],
    test_crops: &[RgbImage],
    test_labels: &[&str],
    opts: &ExperimentOptions,
    strategy: AugmentStrategy,
) -> Result<(Network, TopN, f64)> {
    let owned: Vec<String> = train_labels.iter().map(|s| s.to_string()).collect();
    let outcome = train(train_crops, &owned, &opts.backbone, &opts.train, strategy)?;
    let net = outcome.network;
    let tr = net.embed_batch(train_crops);
    let te = net.embed_batch(test_crops);
    let scores = evaluate_topn(&tr, train_labels, &te, test_labels)?;
    let final_loss = outcome.history.last().map_or(0.0, |h| h.mean_loss);
    Ok((net, scores, final_loss))
}

/// One embedder per strategy (same seed), evaluated on the held-out split.
pub fn run_topn_experiment(
    dataset: &Dataset,
    name: &str,
    opts: &ExperimentOptions,
    strategies: &[AugmentStrategy],
) -> Result<TopNReport> {
    let split = split_dataset(dataset, opts.train_fraction, opts.split_seed)?;
    let train_crops = fin_crops(dataset, &split.train, &opts.postprocess)?;
    let test_crops = fin_crops(dataset, &split.test, &opts.postprocess)?;
    let (trl, tel) = (labels_of(dataset, &split.train), labels_of(dataset, &split.test));
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        log::info!("top-N experiment: training with {}", strategy.display_name());
        let (_, s, final_loss) = train_and_score(&train_crops, &trl, &test_crops, &tel, opts, strategy)?;
        rows.push(TopNRow { strategy, top10: s.top10, top5: s.top5, top1: s.top1, final_loss });
    }
    Ok(TopNReport {
        dataset: name.to_string(),
        train_size: split.train.len(),
        test_size: split.test.len(),
        rows,
    })
}

// ---------------------------------------------------------------- threshold

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRates {
    pub keep_fraction: f64,
    pub fins_kept: usize,
    pub fins_total: usize,
    /// Water inside each fin's bounding box, scored as a would-be detection.
    pub decoys_kept: usize,
    pub decoys_total: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStudy {
    pub calibration: CalibrationReport,
    /// Per-channel histogram overlap `sum(min(p_fin, p_water))`.
    pub overlap: [f64; 3],
    pub rates: Vec<FractionRates>,
}

impl ThresholdStudy {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn histogram_overlap(a: &[u64], b: &[u64]) -> f64 {
    let (sa, sb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / sa).min(y as f64 / sb)).sum()
}

/// Builds the six global histograms, derives the threshold at `percentile`,
/// and scores fins and water decoys at each keep fraction.
pub fn run_threshold_study(dataset: &Dataset, percentile: f64, fractions: &[f64]) -> Result<ThresholdStudy> {
    if dataset.samples.is_empty() {
        return Err(SynthError::Data("threshold study on an empty dataset".into()));
    }
    let (mut fin, mut water) = (ChannelHistograms::default(), ChannelHistograms::default());
    for s in &dataset.samples {
        accumulate_histograms(&s.image, &s.mask, &mut fin, &mut water)?;
    }
    let calibration = CalibrationReport::build(fin, water, percentile, fractions.first().copied().unwrap_or(0.5))?;
    let overlap = [0, 1, 2].map(|c| histogram_overlap(calibration.dolphin.channel(c), calibration.background.channel(c)));

    let mut fin_fracs = Vec::with_capacity(dataset.samples.len());
    let mut decoy_fracs = Vec::with_capacity(dataset.samples.len());
    let probe = ColourThreshold { keep_fraction: 0.0, ..calibration.threshold };
    for s in &dataset.samples {
        fin_fracs.push(dark_fraction(&s.image, &s.mask, &probe)?);
        let (w, h) = s.mask.dims();
        let bounds = s.mask.bbox().ok_or(finpipe_core::CoreError::EmptyMask)?;
        let decoy = BinaryMask::from_bbox(w, h, bounds).and(&s.mask.complement())?;
        if !decoy.is_empty() {
            decoy_fracs.push(dark_fraction(&s.image, &decoy, &probe)?);
        }
    }
    let rates = fractions
        .iter()
        .map(|&f| {
            let fins_kept = fin_fracs.iter().filter(|&&d| d >= f).count();
            let decoys_kept = decoy_fracs.iter().filter(|&&d| d >= f).count();
            FractionRates {
                keep_fraction: f,
                fins_kept,
                fins_total: fin_fracs.len(),
                decoys_kept,
                decoys_total: decoy_fracs.len(),
                rejected: fin_fracs.len() - fins_kept + decoy_fracs.len() - decoys_kept,
            }
        })
        .collect();
    Ok(ThresholdStudy { calibration, overlap, rates })
}

// --------------------------------------------------------------- background

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSampleRow {
    pub sample_id: String,
    pub label: String,
    pub d_bbox_fin: f64,
    pub d_bbox_bg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEffectReport {
    /// Median over samples.
    pub d_bbox_fin: f64,
    /// Median over samples.
    pub d_bbox_bg: f64,
    /// Mean distance from each bounding-box embedding to its own
    /// individual's prototype.
    pub mean_d_bbox_prototypes: f64,
    pub rows: Vec<BackgroundSampleRow>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Embeds bounding-box, fin-only and background-only crops of the `test`
/// samples with `model`; prototypes come from the `train` samples' box crops.
pub fn background_effect(
    dataset: &Dataset,
    model: &Network,
    split: &Split,
    pad_px: u32,
) -> Result<BackgroundEffectReport> {
    let train_boxes = split
        .train
        .iter()
        .map(|&i| bbox_crop(&dataset.samples[i], pad_px))
        .collect::<Result<Vec<_>>>()?;
    let protos = prototypes(&model.embed_batch(&train_boxes), &labels_of(dataset, &split.train))?;
    let mut rows = Vec::with_capacity(split.test.len());
    let mut to_proto = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        let s = &dataset.samples[i];
        let t = crop_triple(s, pad_px)?;
        let eb = model.embed(&t.bbox);
        let ef = model.embed(&t.fin);
        let eg = model.embed(&t.background);
        let proto = protos
            .get(&s.label)
            .ok_or_else(|| SynthError::Data(format!("no training samples for {}", s.label)))?;
        to_proto.push(eb.distance(proto));
        rows.push(BackgroundSampleRow {
            sample_id: s.id.clone(),
            label: s.label.clone(),
            d_bbox_fin: eb.distance(&ef),
            d_bbox_bg: eb.distance(&eg),
        });
    }
    if rows.is_empty() {
        return Err(SynthError::Data("background study needs test samples".into()));
    }
    let fins: Vec<f64> = rows.iter().map(|r| r.d_bbox_fin).collect();
    let bgs: Vec<f64> = rows.iter().map(|r| r.d_bbox_bg).collect();
    Ok(BackgroundEffectReport {
        d_bbox_fin: median(&fins),
        d_bbox_bg: median(&bgs),
        mean_d_bbox_prototypes: to_proto.iter().sum::<f64>() / to_proto.len() as f64,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundExperiment {
    pub effect: BackgroundEffectReport,
    pub bbox_top1: f64,
    pub mask_top1: f64,
    /// `bbox_top1 - mask_top1`, in percentage points.
    pub top1_delta: f64,
}

impl BackgroundExperiment {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains one model on bounding-box crops and one on background-free crops,
/// compares their top-1 accuracy, and measures the box model's embedding
/// distances.
pub fn run_background_effect_experiment(dataset: &Dataset, opts: &ExperimentOptions) -> Result<BackgroundExperiment> {
    let split = split_dataset(dataset, opts.train_fraction, opts.split_seed)?;
    let (trl, tel) = (labels_of(dataset, &split.train), labels_of(dataset, &split.test));
    let pad = opts.postprocess.pad_px;
    let boxes = |idx: &[usize]| idx.iter().map(|&i| bbox_crop(&dataset.samples[i], pad)).collect::<Result<Vec<_>>>();
    let (btr, bte) = (boxes(&split.train)?, boxes(&split.test)?);
    let (bbox_model, bbox_scores, _) = train_and_score(&btr, &trl, &bte, &tel, opts, AugmentStrategy::None)?;
    let (mtr, mte) = (
        fin_crops(dataset, &split.train, &opts.postprocess)?,
        fin_crops(dataset, &split.test, &opts.postprocess)?,
    );
    let (_, mask_scores, _) = train_and_score(&mtr, &trl, &mte, &tel, opts, AugmentStrategy::None)?;
    let effect = background_effect(dataset, &bbox_model, &split, pad)?;
    Ok(BackgroundExperiment {
        effect,
        bbox_top1: bbox_scores.top1,
        mask_top1: mask_scores.top1,
        top1_delta: bbox_scores.top1 - mask_scores.top1,
    })
}
