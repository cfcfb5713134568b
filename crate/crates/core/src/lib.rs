//! Benchmark construction and evaluation for machine-generated-text detectors.
//!
//! Stages: build a labeled dataset from a human corpus and generators, attack
//! its machine samples, calibrate a detector's scores, evaluate and report.

pub mod attack;
pub mod builder;
pub mod calibration;
pub mod config;
pub mod detector;
pub mod fingerprint;
pub mod generator;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod progress;
pub mod reporting;
pub mod schema;
pub mod scoring;

pub use attack::{AttackKind, AttackMode, AttackProvenance, AttackSpec};
pub use builder::{BuildSpec, Pairing};
pub use calibration::{CalibrationModel, ThresholdPolicy};
pub use config::FieldError;
pub use detector::{DetectorHandle, DetectorKind, DetectorRegistry, RawScore, Sign};
pub use generator::{GenerationConfig, GenerationResult};
pub use metrics::{EvalReport, Metric, Prediction, SliceKey};
pub use pipeline::{
    AttackConfig, CalibrateConfig, DetectRequest, EvaluateConfig, JobSpec, PipelineError, ScorerSpec, TrainLmConfig,
    Verdict,
};
pub use progress::Observer;
pub use reporting::{ComparisonTable, RunReport};
pub use schema::{DatasetManifest, Label, Record, SplitRatio, SCHEMA_VERSION};
pub use scoring::{NGramLM, TokenScore};
