//! Experiment orchestration shared by the command line and the acceptance suite.

mod commands;
mod config;
mod lab;
mod manifest;

pub use commands::{
    render_tables, AdaptorSpec, ProbeSummary, Runner, SweepPoint, TrainRecord, UnlearnRecord, ABLATE_DIR, CORPUS_DIR, EVAL_DIR,
    MODELS_DIR, PROBE_DIR, REPORT_DIR, UNLEARNED_DIR,
};
pub use config::{AblateSection, ExperimentConfig, ModelSection, ProbeSection, TrainSection, WorldSection, DEFAULT_LRS};
pub use lab::{provider_of, training_pairs, Lab};
pub use manifest::{audit, sha256_file, walk_files, Artifact, ManifestAudit, RunManifest, Stage, RUN_MANIFEST};
