//! Run configuration: a JSON file deep-merged over the built-in defaults,
//! then command-line overrides. Every run records the resolved settings in a
//! manifest next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use finpipe_core::detection::DetectionConfig;
use finpipe_core::maskproc::PostprocessParams;
use finpipe_core::MatcherConfig;
use finpipe_embedder::{AugmentStrategy, BackboneConfig, TrainConfig};
use finpipe_synth::{ExperimentOptions, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AppError, Result};

pub const HOME_ENV: &str = "FINPIPE_HOME";
pub const DEFAULT_STORE: &str = "finpipe-store";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub strategies: Vec<AugmentStrategy>,
    pub calibration_percentile: f64,
    pub keep_fractions: Vec<f64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            train_fraction: 0.8,
            split_seed: 0,
            strategies: AugmentStrategy::ALL.to_vec(),
            calibration_percentile: 0.9,
            keep_fractions: vec![0.5, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { addr: "127.0.0.1:8080".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub store: Option<PathBuf>,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub augment: AugmentStrategy,
    pub postprocess: PostprocessParams,
    pub detection: DetectionConfig,
    pub matcher: MatcherConfig,
    pub experiments: ExperimentSettings,
    pub serve: ServeConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            store: None,
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentStrategy::None,
            postprocess: PostprocessParams::default(),
            detection: DetectionConfig::default(),
            matcher: MatcherConfig::default(),
            experiments: ExperimentSettings::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl AppConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        let text = fs::read_to_string(path).map_err(AppError::io(path))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_overlay(overlay).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_overlay(overlay: Value) -> std::result::Result<Self, String> {
        let mut base = serde_json::to_value(AppConfig::default()).map_err(|e| e.to_string())?;
        merge(&mut base, overlay, "")?;
        serde_json::from_value(base).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.postprocess.se.validate()?;
        self.postprocess.threshold.validate()?;
        self.detection.validate()?;
        self.matcher.validate()?;
        let e = &self.experiments;
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(AppError::Config(format!("train_fraction must lie in (0, 1), got {}", e.train_fraction)));
        }
        if !(e.calibration_percentile > 0.0 && e.calibration_percentile <= 1.0) {
            return Err(AppError::Config(format!(
                "calibration_percentile must lie in (0, 1], got {}",
                e.calibration_percentile
            )));
        }
        if e.keep_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(AppError::Config("keep fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Store root: explicit flag, then config, then `FINPIPE_HOME`, then
    /// `./finpipe-store`.
    pub fn store_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.store.clone())
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
    }

    pub fn experiment_options(&self) -> ExperimentOptions {
        ExperimentOptions {
            backbone: self.backbone.clone(),
            train: self.train.clone(),
            postprocess: self.postprocess,
            train_fraction: self.experiments.train_fraction,
            split_seed: self.experiments.split_seed,
        }
    }
}

// Objects merge key by key; anything else replaces. Keys absent from the
// defaults are rejected so typos do not pass silently.
fn merge(base: &mut Value, overlay: Value, at: &str) -> std::result::Result<(), String> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(format!("unknown configuration key `{path}`")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    pub config: AppConfig,
    pub seeds: Seeds,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: u64,
    pub train: u64,
    pub split: u64,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: &AppConfig, started_at: String) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            started_at,
            finished_at: String::new(),
            config: config.clone(),
            seeds: Seeds {
                synth: config.synth.seed,
                train: config.train.seed,
                split: config.experiments.split_seed,
            },
            outputs: Vec::new(),
        }
    }

    /// Writes `<dir>/<command>.run.json` and returns its path.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        let path = dir.join(format!("{}.run.json", self.command));
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(AppError::io(&path))?;
        Ok(path)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
