use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use geofaith::entropy::PatternConfig;
use geofaith::geometry::PairSet;
use geofaith::pipeline::{ClusterConfig, GeometryConfig, MetricKind, RefineConfig};
use geofaith::reward::{ManifoldSource, RewardWeights};
use geofaith::vae::{SpreadParam, VaeConfig};

use crate::failure::{Failure, Result};

#[derive(Debug, Clone, Args, Serialize)]
pub struct PatternArgs {
    /// Sliding window length w for the entropy patterns
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Flatness threshold on the mean absolute entropy change
    #[arg(long, default_value_t = 0.1)]
    pub theta_flat: f64,
    /// Spike threshold on the absolute entropy change
    #[arg(long, default_value_t = 1.0)]
    pub tau_spike: f64,
    /// Penalty weights for flatness, spike and oscillation
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.3, 0.5])]
    pub pattern_weights: Vec<f64>,
}

impl PatternArgs {
    pub fn config(&self) -> Result<PatternConfig> {
        if self.pattern_weights.len() != 3 {
            return Err(Failure::usage("--pattern-weights takes exactly three values"));
        }
        let c = PatternConfig {
            window: self.window,
            theta_flat: self.theta_flat,
            tau_spike: self.tau_spike,
            weights: [
                self.pattern_weights[0],
                self.pattern_weights[1],
                self.pattern_weights[2],
            ],
        };
        c.validate().map_err(Failure::usage)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairsArg {
    Consecutive,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Pullback,
    Identity,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadArg {
    Sigma,
    Logvar,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GeometryArgs {
    /// Neighbors per node in the latent graph
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Floor added inside the edge-length square root
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Step pairs averaged into the trajectory features
    #[arg(long, value_enum, default_value_t = PairsArg::All)]
    pub pairs: PairsArg,
    /// Latent metric for edge lengths
    #[arg(long, value_enum, default_value_t = MetricArg::Pullback)]
    pub metric: MetricArg,
    /// Decoder spread parameterization in the pullback map
    #[arg(long, value_enum, default_value_t = SpreadArg::Sigma)]
    pub spread: SpreadArg,
}

impl GeometryArgs {
    pub fn config(&self) -> Result<GeometryConfig> {
        if self.k == 0 {
            return Err(Failure::usage("--k must be at least 1"));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Failure::usage("--eps must be finite and nonnegative"));
        }
        Ok(GeometryConfig {
            k: self.k,
            eps: self.eps,
            pairs: match self.pairs {
                PairsArg::Consecutive => PairSet::Consecutive,
                PairsArg::All => PairSet::All,
            },
            metric: match self.metric {
                MetricArg::Pullback => MetricKind::Pullback,
                MetricArg::Identity => MetricKind::Identity,
            },
            spread: match self.spread {
                SpreadArg::Sigma => SpreadParam::Sigma,
                SpreadArg::Logvar => SpreadParam::LogVar,
            },
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterArgs {
    /// Neighborhood radius in standardized units
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    /// Minimum neighborhood size for a core point, the point included
    #[arg(long, default_value_t = 5)]
    pub min_pts: usize,
    /// Standardized ρ margin below the median that marks a cluster suspicious
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
}

impl ClusterArgs {
    pub fn config(&self) -> Result<ClusterConfig> {
        if !(self.radius.is_finite() && self.radius > 0.0) || self.min_pts == 0 || !self.margin.is_finite() {
            return Err(Failure::usage("cluster radius must be positive and min-pts at least 1"));
        }
        Ok(ClusterConfig {
            radius: self.radius,
            min_pts: self.min_pts,
            suspicion_margin: self.margin,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RefineArgs {
    /// Detector weight in the fused score
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Retention threshold on the fused score (strict)
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
}

impl RefineArgs {
    pub fn config(&self) -> Result<RefineConfig> {
        let c = RefineConfig {
            alpha: self.alpha,
            eta: self.eta,
        };
        c.validate().map_err(Failure::usage)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    /// Logistic model over step features
    Baseline,
    /// External child process speaking JSON lines
    Process,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectorArgs {
    /// Step detector implementation
    #[arg(long, value_enum, default_value_t = DetectorKind::Baseline)]
    pub detector: DetectorKind,
    /// Baseline detector weights (JSON written by train-detector)
    #[arg(long)]
    pub detector_weights: Option<PathBuf>,
    /// Program to spawn for the process detector
    #[arg(long)]
    pub detector_cmd: Option<String>,
    /// Argument passed to the detector program (repeatable)
    #[arg(long = "detector-arg", allow_hyphen_values = true)]
    pub detector_args: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VaeArgs {
    /// VAE input dimension; wider hidden states are PCA-reduced to it
    #[arg(long, default_value_t = 256)]
    pub input_dim: usize,
    /// Encoder hidden widths (the decoder mirrors them)
    #[arg(long, value_delimiter = ',', default_values_t = [256, 128, 64])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub latent_dim: usize,
    /// Final KL weight after warmup
    #[arg(long, default_value_t = 0.5)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 20)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Global gradient-norm clip
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Ensemble members, trained with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 5)]
    pub members: usize,
}

impl VaeArgs {
    pub fn config(&self, seed: u64) -> Result<VaeConfig> {
        let c = VaeConfig {
            input_dim: self.input_dim,
            hidden_widths: self.hidden.clone(),
            latent_dim: self.latent_dim,
            beta_max: self.beta_max,
            warmup_epochs: self.warmup_epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            seed,
            ..VaeConfig::default()
        };
        c.validate().map_err(Failure::usage)?;
        if self.members == 0 {
            return Err(Failure::usage("--members must be at least 1"));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldArg {
    FinalStep,
    MeanOverSteps,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RewardArgs {
    /// Outcome reward weight λ1
    #[arg(long, default_value_t = 1.0)]
    pub lambda_outcome: f64,
    /// Process reward weight λ2
    #[arg(long, default_value_t = 0.5)]
    pub lambda_process: f64,
    /// Entropy reward weight λ3
    #[arg(long, default_value_t = 0.3)]
    pub lambda_entropy: f64,
    /// Manifold reward weight λ4
    #[arg(long, default_value_t = 0.2)]
    pub lambda_manifold: f64,
    /// Hidden state(s) feeding the manifold reward
    #[arg(long, value_enum, default_value_t = ManifoldArg::FinalStep)]
    pub manifold: ManifoldArg,
}

impl RewardArgs {
    pub fn weights(&self) -> Result<RewardWeights> {
        let w = RewardWeights {
            outcome: self.lambda_outcome,
            process: self.lambda_process,
            entropy: self.lambda_entropy,
            manifold: self.lambda_manifold,
            ..RewardWeights::default()
        };
        w.validate().map_err(Failure::usage)?;
        Ok(w)
    }

    pub fn source(&self) -> ManifoldSource {
        match self.manifold {
            ManifoldArg::FinalStep => ManifoldSource::FinalStep,
            ManifoldArg::MeanOverSteps => ManifoldSource::MeanOverSteps,
        }
    }
}
