//! Experiment harness: configuration, datasets, the pretrain / distill / tune
//! / eval pipeline, multi-seed ablations, manifests and reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
pub mod stages;

pub use config::{RunConfig, Scenario};
pub use dataset::{generate_dataset, ConceptShift, DatasetSpec, Datasets, DomainShift};
pub use experiment::{CurveRow, EvalRow, Evaluator, Method};
pub use stages::{run_stage, verify, Manifest, StageRequest};
