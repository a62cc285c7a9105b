//! Experiment protocols, the synthetic corpus and report emission.

pub mod config;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod synthetic;

pub use config::PipelineConfig;
pub use pipeline::{run_experiment, Workspace};
pub use protocol::{
    learning_curve_partitions, pair_dataset, split_fixed, stratified_partition, ExperimentSpec, ExperimentTask, Feature, Row,
    Task,
};
pub use report::{AccuracyReport, Cell, LearningCurveReport};
pub use synthetic::{gen_synthetic_corpus, gen_synthetic_paintings};
