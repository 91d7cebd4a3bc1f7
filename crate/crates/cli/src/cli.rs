//! `finpipe` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use finpipe_core::detection::{
    load_detections, map_over_thresholds, write_detection_lines, DetectionConfig, DetectionLine, DetectorBackend,
    IouThresholdGrid,
};
use finpipe_core::matcher::{calibrate_novelty_threshold, top_n_accuracy, MatchReport};
use finpipe_core::{open_store_with, EmbeddingVector, MatchResult, Store, StoreOptions};
use finpipe_embedder::{load_model, save_model, train, write_history_csv, AugmentStrategy, Network};
use finpipe_synth::{
    generate_synthetic_catalogue, read_dataset, run_background_effect_experiment, run_threshold_study,
    run_topn_experiment, split_labels, write_dataset, Background, SynthConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{now, AppConfig, RunManifest};
use crate::error::{AppError, Result};
use crate::pipeline::{detection_config, process_batch, rank_or_empty, CropSet, DetectorKind, Pipeline};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FIN_CATEGORY: &str = "dolphin";

#[derive(Debug, Parser)]
#[command(name = "finpipe", version, about = "Dorsal-fin photo-identification pipeline")]
pub struct Cli {
    /// JSON configuration file merged over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fin catalogue with ground-truth masks.
    Synth(SynthArgs),
    /// Colour-threshold study on a dataset with masks.
    Calibrate(CalibrateArgs),
    /// Batch pipeline: detections to background-free crops.
    Process(ProcessArgs),
    /// Train the embedder on labelled crops.
    Train(TrainArgs),
    /// Add individuals to a catalogue store.
    Enroll(EnrollArgs),
    /// Rank query crops against the catalogue.
    Match(MatchArgs),
    /// mAP table, top-N accuracy, or a full experiment.
    Evaluate(EvaluateArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackgroundArg {
    Plain,
    Textured,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub individuals: Option<usize>,
    #[arg(long)]
    pub images_per_individual: Option<usize>,
    #[arg(long, value_enum)]
    pub background: Option<BackgroundArg>,
    /// Start from the identity-correlated background preset.
    #[arg(long)]
    pub confounded: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Dataset directory (images/, masks/, labels.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Report path; defaults to `<data>/threshold_study.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    /// Directory of `<image_id>.png` files.
    #[arg(long)]
    pub images: PathBuf,
    /// Annotation or detector results file.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    /// JSON object mapping image id to individual label.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Per-channel threshold `R,G,B`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub threshold: Option<Vec<u8>>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub pad: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Crop set directory (crops/, labels.json).
    #[arg(long)]
    pub crops: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub augment: Option<AugmentStrategy>,
    /// Hold out a stratified test split and record it next to the model.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    /// Enrol every label of a crop set as one individual.
    #[arg(long, conflicts_with = "label")]
    pub crops: Option<PathBuf>,
    /// Restrict `--crops` to the training side of a split file.
    #[arg(long, requires = "crops")]
    pub split: Option<PathBuf>,
    /// Skip recalibrating the novelty threshold after a bulk enrolment.
    #[arg(long)]
    pub no_calibrate: bool,
    /// Label of a single new individual built from `images`.
    #[arg(long, requires = "images")]
    pub label: Option<String>,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub json: bool,
    /// Report the stored ranking of a processed RoI instead of embedding files.
    #[arg(long, conflicts_with = "images")]
    pub roi: Vec<String>,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Topn,
    Background,
    Threshold,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Mask mAP over the IoU grid.
    #[arg(long)]
    pub map: bool,
    /// Ground-truth annotation file for `--map`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Detector results for `--map`; the annotations themselves when absent.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    pub name: String,
    /// Top-1/5/10 accuracy of crops against a catalogue.
    #[arg(long)]
    pub topn: bool,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub crops: Option<PathBuf>,
    /// Evaluate only the test side of a split file.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub experiment: Option<ExperimentKind>,
    /// Dataset directory for `--experiment`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "evaluation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
}

/// Crop ids on each side of a train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(AppError::io(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn split_path(model: &Path) -> PathBuf {
    with_suffix(model, ".split.json")
}

pub fn history_path(model: &Path) -> PathBuf {
    with_suffix(model, ".history.csv")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Top-N accuracies (percent) of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNEvaluation {
    pub queries: usize,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

/// Parses `args` (program name first) and runs the command, writing its
/// report to `out`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| AppError::Config(e.to_string()))?;
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    run(cli, &argv, out)
}

pub fn run(cli: Cli, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Calibrate(_) => "calibrate",
        Command::Process(_) => "process",
        Command::Train(_) => "train",
        Command::Enroll(_) => "enroll",
        Command::Match(_) => "match",
        Command::Evaluate(_) => "evaluate",
        Command::Serve(_) => "serve",
    };
    let started = now();
    let (dir, outputs) = match cli.command {
        Command::Synth(a) => synth(a, &mut cfg, out)?,
        Command::Calibrate(a) => calibrate(a, &mut cfg, out)?,
        Command::Process(a) => process(a, &mut cfg, out)?,
        Command::Train(a) => train_cmd(a, &mut cfg, out)?,
        Command::Enroll(a) => enroll(a, &mut cfg, out)?,
        Command::Match(a) => match_cmd(a, &mut cfg, out)?,
        Command::Evaluate(a) => evaluate(a, &mut cfg, out)?,
        Command::Serve(a) => serve(a, &mut cfg, argv, started.clone())?,
    };
    let mut manifest = RunManifest::new(name, argv, &cfg, started);
    manifest.outputs = outputs;
    manifest.write(&dir)?;
    Ok(())
}

type Outcome = (PathBuf, Vec<String>);

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn io_out(e: std::io::Error) -> AppError {
    AppError::Io { path: PathBuf::from("<output>"), source: e }
}

fn synth(a: SynthArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    if a.confounded {
        cfg.synth = SynthConfig::confounded();
    }
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.individuals {
        s.num_individuals = v;
    }
    if let Some(v) = a.images_per_individual {
        s.images_per_individual = v;
    }
    if let Some(b) = a.background {
        s.background = match b {
            BackgroundArg::Plain => Background::PlainSea,
            BackgroundArg::Textured => Background::TexturedSea,
        };
    }
    cfg.validate()?;
    let ds = generate_synthetic_catalogue(&cfg.synth)?;
    write_dataset(&ds, &a.out)?;
    let lines: Vec<DetectionLine> = ds
        .samples
        .iter()
        .map(|s| DetectionLine::from_mask(&s.id, FIN_CATEGORY, None, &s.mask))
        .collect();
    let ann = a.out.join(ANNOTATIONS_FILE);
    write_detection_lines(&ann, &lines)?;
    writeln!(
        out,
        "{} images of {} individuals written to {}",
        ds.samples.len(),
        cfg.synth.num_individuals,
        a.out.display()
    )
    .map_err(io_out)?;
    Ok((a.out.clone(), vec![display(&a.out), display(&ann)]))
}

fn calibrate(a: CalibrateArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    if let Some(p) = a.percentile {
        cfg.experiments.calibration_percentile = p;
    }
    if let Some(f) = a.fractions {
        cfg.experiments.keep_fractions = f;
    }
    cfg.validate()?;
    let ds = read_dataset(&a.data)?;
    let study = run_threshold_study(&ds, cfg.experiments.calibration_percentile, &cfg.experiments.keep_fractions)?;
    let path = a.out.unwrap_or_else(|| a.data.join("threshold_study.json"));
    let json = study.to_json()?;
    fs::write(&path, &json).map_err(AppError::io(&path))?;
    let t = study.calibration.threshold;
    writeln!(out, "threshold rgb {:?} at percentile {}", t.rgb, t.percentile).map_err(io_out)?;
    writeln!(out, "overlap {:.4} {:.4} {:.4}", study.overlap[0], study.overlap[1], study.overlap[2]).map_err(io_out)?;
    for r in &study.rates {
        writeln!(
            out,
            "f={}: fins kept {}/{}, decoys kept {}/{}, rejected {}",
            r.keep_fraction, r.fins_kept, r.fins_total, r.decoys_kept, r.decoys_total, r.rejected
        )
        .map_err(io_out)?;
    }
    Ok((parent_dir(&path), vec![display(&path)]))
}

fn process(a: ProcessArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    if let Some(k) = a.detector {
        cfg.detection.backend = k.backend();
    }
    if let Some(c) = a.min_confidence {
        cfg.detection.min_confidence = c;
    }
    let pp = &mut cfg.postprocess;
    if let Some(t) = &a.threshold {
        pp.threshold.rgb = [t[0], t[1], t[2]];
    }
    if let Some(f) = a.keep_fraction {
        pp.threshold.keep_fraction = f;
    }
    if let Some(k) = a.kernel {
        pp.se.k = k;
    }
    if let Some(p) = a.pad {
        pp.pad_px = p;
    }
    cfg.validate()?;
    let labels: BTreeMap<String, String> = match &a.labels {
        Some(p) => serde_json::from_slice(&fs::read(p).map_err(AppError::io(p))?)?,
        None => BTreeMap::new(),
    };
    let (_, summary) = process_batch(&a.images, &a.detections, &cfg.detection, &cfg.postprocess, &labels, &a.out)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?).map_err(io_out)?;
    Ok((a.out.clone(), vec![display(&a.out.join("crops")), display(&a.out.join("rois"))]))
}

fn train_cmd(a: TrainArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = a.augment {
        cfg.augment = s;
    }
    if let Some(f) = a.train_fraction {
        cfg.experiments.train_fraction = f;
    }
    if let Some(s) = a.split_seed {
        cfg.experiments.split_seed = s;
    }
    cfg.validate()?;
    let set = CropSet::read(&a.crops)?;
    let (images, labels) = set.labelled()?;
    let mut outputs = vec![display(&a.model)];
    let (images, labels) = if a.train_fraction.is_some() {
        let split = split_labels(&labels, cfg.experiments.train_fraction, cfg.experiments.split_seed)?;
        let file = SplitFile {
            fraction: cfg.experiments.train_fraction,
            seed: cfg.experiments.split_seed,
            train: split.train.iter().map(|&i| set.items[i].id.clone()).collect(),
            test: split.test.iter().map(|&i| set.items[i].id.clone()).collect(),
        };
        let sp = split_path(&a.model);
        if let Some(d) = sp.parent() {
            fs::create_dir_all(d).map_err(AppError::io(d))?;
        }
        fs::write(&sp, serde_json::to_vec_pretty(&file)?).map_err(AppError::io(&sp))?;
        outputs.push(display(&sp));
        (
            split.train.iter().map(|&i| images[i].clone()).collect::<Vec<_>>(),
            split.train.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>(),
        )
    } else {
        (images, labels)
    };
    let outcome = train(&images, &labels, &cfg.backbone, &cfg.train, cfg.augment)?;
    let sha = save_model(&outcome.network, &a.model, Some(&cfg.train), Some(cfg.augment))?;
    let hp = history_path(&a.model);
    write_history_csv(&hp, &outcome.history)?;
    outputs.push(display(&hp));
    for h in &outcome.history {
        writeln!(out, "epoch {} loss {:.6} lr {:e} active {}", h.epoch, h.mean_loss, h.lr, h.active_triplets)
            .map_err(io_out)?;
    }
    writeln!(out, "model {} sha256 {sha}", a.model.display()).map_err(io_out)?;
    Ok((parent_dir(&a.model), outputs))
}

/// Opens (or creates) the store sized for `model`.
pub fn open_store_for(root: &Path, cfg: &AppConfig, model: Option<&Network>) -> Result<Store> {
    let opts = StoreOptions {
        dimension: model.map_or(cfg.backbone.embedding_dim, |m| m.config.embedding_dim),
        matcher_config: cfg.matcher,
        ..StoreOptions::default()
    };
    Ok(open_store_with(root, opts)?)
}

fn load_optional(path: Option<&Path>) -> Result<Option<Network>> {
    path.map(|p| load_model(p).map(|(n, _)| n)).transpose().map_err(Into::into)
}

fn enroll(a: EnrollArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    cfg.validate()?;
    let root = cfg.store_root(a.store.as_deref());
    let (model, sidecar) = load_model(&a.model)?;
    let store = open_store_for(&root, cfg, Some(&model))?;
    let pipeline = Pipeline::new(store, Some(model), cfg.postprocess)?;
    pipeline.store().set_embedder_ref(&format!("{}#sha256={}", a.model.display(), sidecar.sha256))?;
    if let Some(label) = &a.label {
        let crops = a
            .images
            .iter()
            .map(|p| Ok(image::open(p)?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        let ind = pipeline.enroll(label, &crops)?;
        writeln!(out, "enrolled {} ({}) from {} images", ind.id, ind.label, crops.len()).map_err(io_out)?;
        return Ok((root.clone(), vec![display(&root)]));
    }
    let crops_dir = a
        .crops
        .as_ref()
        .ok_or_else(|| AppError::Config("enroll needs --crops or --label with images".into()))?;
    let set = CropSet::read(crops_dir)?;
    let keep: Option<Vec<String>> = a.split.as_deref().map(SplitFile::read).transpose()?.map(|s| s.train);
    let mut groups: BTreeMap<String, Vec<image::RgbImage>> = BTreeMap::new();
    for it in &set.items {
        if keep.as_ref().is_some_and(|k| !k.contains(&it.id)) {
            continue;
        }
        let Some(label) = &it.label else { continue };
        groups.entry(label.clone()).or_default().push(it.image.clone());
    }
    if groups.is_empty() {
        return Err(AppError::Data(format!("no labelled crops to enrol under {}", crops_dir.display())));
    }
    let mut enrolled = Vec::new();
    for (label, crops) in &groups {
        let ind = pipeline.enroll(label, crops)?;
        writeln!(out, "enrolled {} ({}) from {} crops", ind.id, ind.label, crops.len()).map_err(io_out)?;
        enrolled.push(ind);
    }
    if !a.no_calibrate {
        let classes: Vec<(Vec<EmbeddingVector>, EmbeddingVector)> = enrolled
            .iter()
            .filter_map(|i| i.prototype.as_ref().map(|p| (i.embeddings.clone(), p.vector())))
            .collect();
        let mut matcher = pipeline.store().snapshot().matcher_config;
        matcher.novelty_threshold = calibrate_novelty_threshold(&classes, matcher.novelty_quantile)?;
        if matcher.novelty_threshold > 0.0 {
            pipeline.store().set_matcher_config(matcher)?;
            writeln!(out, "novelty threshold {:.6}", matcher.novelty_threshold).map_err(io_out)?;
        } else {
            log::warn!("calibrated novelty threshold is zero; keeping {}", cfg.matcher.novelty_threshold);
        }
    }
    Ok((root.clone(), vec![display(&root)]))
}

/// Match reports for query crops, truncated to `top`.
pub fn match_files(pipeline: &Pipeline, images: &[PathBuf], top: usize) -> Result<Vec<MatchReport>> {
    images
        .iter()
        .map(|p| {
            let crop = image::open(p)?.to_rgb8();
            let result = pipeline.match_crop(&crop)?;
            Ok(MatchReport::new(display(p), &result, top))
        })
        .collect()
}

fn write_reports(reports: &[MatchReport], json: bool, out: &mut dyn Write) -> Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(reports)?).map_err(io_out)?;
        return Ok(());
    }
    for r in reports {
        writeln!(out, "query {} novel={} threshold={:.6}", r.query, r.novel, r.threshold).map_err(io_out)?;
        writeln!(out, "{:>4}  {:<12} {:<16} {:>10}", "rank", "individual", "label", "distance").map_err(io_out)?;
        for (i, m) in r.ranked.iter().enumerate() {
            writeln!(out, "{:>4}  {:<12} {:<16} {:>10.6}", i + 1, m.individual_id, m.label, m.distance)
                .map_err(io_out)?;
        }
    }
    Ok(())
}

fn match_cmd(a: MatchArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    if let Some(t) = a.top {
        cfg.matcher.top_n = t;
    }
    cfg.validate()?;
    let top = cfg.matcher.top_n;
    let root = cfg.store_root(a.store.as_deref());
    let model = load_optional(a.model.as_deref())?;
    let store = open_store_for(&root, cfg, model.as_ref())?;
    let pipeline = Pipeline::new(store, model, cfg.postprocess)?;
    let reports = if !a.roi.is_empty() {
        a.roi
            .iter()
            .map(|id| Ok(MatchReport::new(id.as_str(), &pipeline.roi_matches(id, top)?, top)))
            .collect::<Result<Vec<_>>>()?
    } else if !a.images.is_empty() {
        match_files(&pipeline, &a.images, top)?
    } else {
        return Err(AppError::Config("match needs query images or --roi".into()));
    };
    write_reports(&reports, a.json, out)?;
    Ok((root, Vec::new()))
}

/// Ranks every (test-split) crop of `set` against the catalogue.
pub fn evaluate_crops(
    pipeline: &Pipeline,
    set: &CropSet,
    split: Option<&SplitFile>,
) -> Result<(Vec<MatchResult>, Vec<String>)> {
    let snap = pipeline.store().snapshot();
    let mut results = Vec::new();
    let mut truths = Vec::new();
    for it in &set.items {
        if split.is_some_and(|s| !s.test.contains(&it.id)) {
            continue;
        }
        let Some(label) = &it.label else { continue };
        let truth = snap
            .individuals
            .iter()
            .find(|i| &i.label == label && !i.is_noise)
            .map(|i| i.id.clone())
            .unwrap_or_default();
        let e = pipeline.embed(&it.image)?;
        results.push(rank_or_empty(&e, &snap)?);
        truths.push(truth);
    }
    if results.is_empty() {
        return Err(AppError::Data("no labelled crops to evaluate".into()));
    }
    Ok((results, truths))
}

pub fn topn_evaluation(results: &[MatchResult], truths: &[String]) -> Result<TopNEvaluation> {
    Ok(TopNEvaluation {
        queries: results.len(),
        top1: top_n_accuracy(results, truths, 1)?,
        top5: top_n_accuracy(results, truths, 5)?,
        top10: top_n_accuracy(results, truths, 10)?,
    })
}

fn write_file(path: &Path, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    fs::write(path, text).map_err(AppError::io(path))?;
    outputs.push(display(path));
    Ok(())
}

fn evaluate(a: EvaluateArgs, cfg: &mut AppConfig, out: &mut dyn Write) -> Result<Outcome> {
    cfg.validate()?;
    if !a.map && !a.topn && a.experiment.is_none() {
        return Err(AppError::Config("evaluate needs --map, --topn or --experiment".into()));
    }
    fs::create_dir_all(&a.out).map_err(AppError::io(&a.out))?;
    let mut outputs = Vec::new();
    if a.map {
        let gt_path = a
            .annotations
            .as_ref()
            .ok_or_else(|| AppError::Config("--map needs --annotations".into()))?;
        let gts = load_detections(
            gt_path,
            &DetectionConfig { min_confidence: 0.0, backend: DetectorBackend::OracleAnnotations },
            None,
        )?;
        let preds = match &a.predictions {
            Some(p) => load_detections(p, &detection_config(DetectorKind::ResultsFile, Some(0.0)), None)?,
            None => gts.clone(),
        };
        let report = map_over_thresholds(&a.name, &preds, &gts, &IouThresholdGrid::default())?;
        write!(out, "{}", report.to_table()).map_err(io_out)?;
        write_file(&a.out.join("map.csv"), &report.to_csv(), &mut outputs)?;
        write_file(&a.out.join("map.json"), &serde_json::to_string_pretty(&report)?, &mut outputs)?;
    }
    if a.topn {
        let model_path = a.model.as_ref().ok_or_else(|| AppError::Config("--topn needs --model".into()))?;
        let crops = a.crops.as_ref().ok_or_else(|| AppError::Config("--topn needs --crops".into()))?;
        let (model, _) = load_model(model_path)?;
        let root = cfg.store_root(a.store.as_deref());
        let store = open_store_for(&root, cfg, Some(&model))?;
        let pipeline = Pipeline::new(store, Some(model), cfg.postprocess)?;
        let split = a.split.as_deref().map(SplitFile::read).transpose()?;
        let set = CropSet::read(crops)?;
        let (results, truths) = evaluate_crops(&pipeline, &set, split.as_ref())?;
        let eval = topn_evaluation(&results, &truths)?;
        writeln!(
            out,
            "queries {} top-1 {:.2} top-5 {:.2} top-10 {:.2}",
            eval.queries, eval.top1, eval.top5, eval.top10
        )
        .map_err(io_out)?;
        write_file(&a.out.join("topn.json"), &serde_json::to_string_pretty(&eval)?, &mut outputs)?;
    }
    if let Some(kind) = a.experiment {
        let data = a.data.as_ref().ok_or_else(|| AppError::Config("--experiment needs --data".into()))?;
        let ds = read_dataset(data)?;
        let opts = cfg.experiment_options();
        match kind {
            ExperimentKind::Topn => {
                let report = run_topn_experiment(&ds, &a.name, &opts, &cfg.experiments.strategies)?;
                write!(out, "{}", report.to_table()).map_err(io_out)?;
                write_file(&a.out.join("topn_report.json"), &report.to_json()?, &mut outputs)?;
                write_file(&a.out.join("topn_report.csv"), &report.to_csv()?, &mut outputs)?;
                write_file(&a.out.join("topn_report.md"), &report.to_table(), &mut outputs)?;
            }
            ExperimentKind::Background => {
                let report = run_background_effect_experiment(&ds, &opts)?;
                let e = &report.effect;
                writeln!(
                    out,
                    "median d(bbox,fin) {:.4} median d(bbox,bg) {:.4} mean d(bbox,prototype) {:.4}",
                    e.d_bbox_fin, e.d_bbox_bg, e.mean_d_bbox_prototypes
                )
                .map_err(io_out)?;
                writeln!(
                    out,
                    "top-1 bbox {:.2} mask {:.2} delta {:+.2}",
                    report.bbox_top1, report.mask_top1, report.top1_delta
                )
                .map_err(io_out)?;
                write_file(&a.out.join("background_report.json"), &report.to_json()?, &mut outputs)?;
            }
            ExperimentKind::Threshold => {
                let study = run_threshold_study(
                    &ds,
                    cfg.experiments.calibration_percentile,
                    &cfg.experiments.keep_fractions,
                )?;
                writeln!(out, "threshold rgb {:?}", study.calibration.threshold.rgb).map_err(io_out)?;
                write_file(&a.out.join("threshold_study.json"), &study.to_json()?, &mut outputs)?;
            }
        }
    }
    Ok((a.out.clone(), outputs))
}

fn serve(a: ServeArgs, cfg: &mut AppConfig, argv: &[String], started: String) -> Result<Outcome> {
    if let Some(addr) = a.addr {
        cfg.serve.addr = addr;
    }
    cfg.validate()?;
    let addr: SocketAddr = cfg
        .serve
        .addr
        .parse()
        .map_err(|e| AppError::Config(format!("bad listen address `{}`: {e}", cfg.serve.addr)))?;
    let root = cfg.store_root(a.store.as_deref());
    let model = load_optional(a.model.as_deref())?;
    let store = open_store_for(&root, cfg, model.as_ref())?;
    let pipeline = Arc::new(Pipeline::new(store, model, cfg.postprocess)?);
    // The service runs until killed, so its manifest goes out at start-up.
    RunManifest::new("serve", argv, cfg, started).write(&root)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(AppError::io("<runtime>"))?;
    rt.block_on(crate::service::serve(pipeline, addr)).map_err(AppError::io("<listener>"))?;
    Ok((root, Vec::new()))
}
