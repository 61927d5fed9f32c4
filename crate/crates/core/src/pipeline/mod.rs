//! Detector construction: per-step feature extraction, density clustering of
//! trajectories in (ρ, C) space, fused step scoring and bootstrapped
//! labeling.

mod analysis;
mod bootstrap;
mod cluster;
mod detector;

pub use analysis::{analyze, encode_steps, GeometryConfig, MetricKind, StepFeatures, TrajectoryAnalysis};
pub use bootstrap::{
    bootstrap_round, fused_score, refine_group, AnnotatedStep, BootstrapSample, BootstrapState, RefineConfig,
    RefineInput,
};
pub use cluster::{dbscan, density_cluster, standardize_columns, ClusterAssignment, ClusterConfig};
pub use detector::{train_baseline, BaselineDetector, Detector, DetectorRequest, DetectorTraining, ProcessDetector};

use thiserror::Error;

use crate::entropy::EntropyError;
use crate::geometry::GeometryError;
use crate::vae::VaeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{name} = {value} lies outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("detector has no trained weights")]
    UntrainedDetector,
    #[error("detector training set is empty or has a single class")]
    DegenerateTrainingSet,
    #[error("external detector: {0}")]
    DetectorProcess(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("geometry stage: {0}")]
    Geometry(#[from] GeometryError),
    #[error("entropy stage: {0}")]
    Entropy(#[from] EntropyError),
    #[error("encoding stage: {0}")]
    Vae(#[from] VaeError),
}
