use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorRequest, PipelineError, TrajectoryAnalysis};
use crate::trace_store::FaithLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Weight of the detector score in the fused score.
    pub alpha: f64,
    /// Retention threshold (strict).
    pub eta: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { alpha: 0.7, eta: 0.5 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, value) in [("alpha", self.alpha), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PipelineError::OutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// s_t = α·s_det + (1−α)·s_temp. The result is clamped to the interval
/// spanned by the inputs to absorb rounding.
pub fn fused_score(s_det: f64, s_temp: f64, alpha: f64) -> Result<f64, PipelineError> {
    for (name, value) in [("s_det", s_det), ("s_temp", s_temp), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(PipelineError::OutOfRange { name, value });
        }
    }
    let s = alpha * s_det + (1.0 - alpha) * s_temp;
    Ok(s.clamp(s_det.min(s_temp), s_det.max(s_temp)))
}

/// One step after refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    pub traj_id: String,
    pub step: usize,
    pub s_det: f64,
    pub s_temp: f64,
    pub s_fused: f64,
    pub retained: bool,
    /// Detector decision: faithful when s_det > 0.5.
    pub label: FaithLabel,
    pub round: usize,
    pub cluster: Option<usize>,
}

/// A trajectory handed to refinement with its cluster id (`None` for noise).
#[derive(Debug, Clone, Copy)]
pub struct RefineInput<'a> {
    pub analysis: &'a TrajectoryAnalysis,
    pub cluster: Option<usize>,
}

/// Scores every step of every input trajectory.
pub fn refine_group(
    inputs: &[RefineInput<'_>],
    detector: &dyn Detector,
    config: &RefineConfig,
    round: usize,
) -> Result<Vec<AnnotatedStep>, PipelineError> {
    config.validate()?;
    let per_traj = inputs
        .par_iter()
        .map(|input| {
            let a = input.analysis;
            (0..a.steps.len())
                .map(|t| {
                    let req = DetectorRequest {
                        traj_id: &a.id,
                        step: t,
                        query: &a.query,
                        steps: &a.step_texts[..=t],
                        features: a.steps[t],
                    };
                    let s_det = detector.score(&req)?;
                    let s_temp = a.steps[t].s_temp;
                    let s_fused = fused_score(s_det, s_temp, config.alpha)?;
                    Ok(AnnotatedStep {
                        traj_id: a.id.clone(),
                        step: t,
                        s_det,
                        s_temp,
                        s_fused,
                        retained: s_fused > config.eta,
                        label: if s_det > 0.5 {
                            FaithLabel::Faithful
                        } else {
                            FaithLabel::Unfaithful
                        },
                        round,
                        cluster: input.cluster,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_traj.into_iter().flatten().collect())
}

/// A labeled step in the bootstrapped dataset, with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSample {
    pub traj_id: String,
    pub step: usize,
    pub label: FaithLabel,
    pub round: usize,
    pub s_det: f64,
    pub s_temp: f64,
    pub s_fused: f64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapState {
    pub round: usize,
    pub samples: Vec<BootstrapSample>,
}

impl BootstrapState {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains(&self, traj_id: &str, step: usize) -> bool {
        self.samples.iter().any(|s| s.traj_id == traj_id && s.step == step)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::InvalidConfig(format!("bootstrap state: {e}")))
    }
}

/// Refines `pool` (the suspicious trajectories) and appends every retained
/// step not already present, keyed by (trajectory id, step). Existing samples
/// are never modified. Returns the next state and all annotations.
pub fn bootstrap_round(
    state: &BootstrapState,
    pool: &[RefineInput<'_>],
    detector: &dyn Detector,
    config: &RefineConfig,
) -> Result<(BootstrapState, Vec<AnnotatedStep>), PipelineError> {
    let round = state.round + 1;
    let annotated = refine_group(pool, detector, config, round)?;
    let mut seen: HashSet<(String, usize)> = state.samples.iter().map(|s| (s.traj_id.clone(), s.step)).collect();
    let mut next = state.clone();
    next.round = round;
    for a in annotated.iter().filter(|a| a.retained) {
        if seen.insert((a.traj_id.clone(), a.step)) {
            next.samples.push(BootstrapSample {
                traj_id: a.traj_id.clone(),
                step: a.step,
                label: a.label,
                round,
                s_det: a.s_det,
                s_temp: a.s_temp,
                s_fused: a.s_fused,
                cluster: a.cluster,
            });
        }
    }
    Ok((next, annotated))
}
