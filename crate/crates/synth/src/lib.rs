//! Synthetic dorsal-fin catalogues and the evaluation experiments run on
//! them.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod generate;

pub use dataset::{read_dataset, write_dataset};
pub use error::{Result, SynthError};
pub use experiments::{
    run_background_effect_experiment, run_threshold_study, run_topn_experiment, split_dataset,
    split_labels,
    BackgroundEffectReport, BackgroundExperiment, ExperimentOptions, Split, ThresholdStudy, TopNReport,
};
pub use generate::{generate_synthetic_catalogue, Background, Dataset, FinShape, Sample, SynthConfig};
