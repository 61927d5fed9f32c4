use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::entropy::{temporal_scores, EntropyTrace, PatternConfig, StepTemporalScore};
use crate::geometry::{
    build_geodesic_graph, euclidean_distance, fisher_rao_between, total_variance, trajectory_geometry, EnsembleMetric,
    GeodesicGraph, IdentityMetric, JacobianMode, LatentMetric, PairSet, TrajectoryGeometry, UncertaintySummary,
    DEFAULT_EPS, DEFAULT_K,
};
use crate::trace_store::{DomainTag, FaithLabel, Trajectory};
use crate::vae::{SpreadParam, VaeEnsemble};

/// Detector inputs for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFeatures {
    /// Distortion ratio of the step's transition (step t−1 → t; step 0 uses 0 → 1).
    pub rho: f64,
    pub s_temp: f64,
    /// Fisher–Rao length of the same transition.
    pub dfr: f64,
    /// Encoding uncertainty U at the step.
    pub u: f64,
}

impl StepFeatures {
    pub fn to_array(self) -> [f64; 4] {
        [self.rho, self.s_temp, self.dfr, self.u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Decoder pullback metric of the ensemble.
    #[default]
    Pullback,
    /// Flat latent metric.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub k: usize,
    pub eps: f64,
    /// Pair set for trajectory-level averages.
    pub pairs: PairSet,
    pub metric: MetricKind,
    pub spread: SpreadParam,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            k: DEFAULT_K,
            eps: DEFAULT_EPS,
            pairs: PairSet::All,
            metric: MetricKind::Pullback,
            spread: SpreadParam::Sigma,
        }
    }
}

/// Everything downstream stages need about one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAnalysis {
    pub id: String,
    pub query: String,
    pub domain: DomainTag,
    pub step_texts: Vec<String>,
    pub gold_labels: Vec<Option<FaithLabel>>,
    pub latents: Vec<UncertaintySummary>,
    pub geometry: TrajectoryGeometry,
    pub entropy: Vec<f64>,
    pub temporal: Vec<StepTemporalScore>,
    pub steps: Vec<StepFeatures>,
}

/// Ensemble-aggregated Gaussian for every step of a trajectory.
pub fn encode_steps(ensemble: &VaeEnsemble, t: &Trajectory) -> Result<Vec<UncertaintySummary>, PipelineError> {
    t.steps
        .par_iter()
        .map(|s| {
            let raw: Vec<f64> = s.hidden_state.iter().map(|&v| v as f64).collect();
            Ok(total_variance(ensemble, &raw)?)
        })
        .collect()
}

fn pair_ratio(graph: &GeodesicGraph, dist_from: &[f64], a: usize, b: usize) -> Option<f64> {
    let d_euc = euclidean_distance(&graph.nodes[a], &graph.nodes[b]);
    let d_geo = dist_from[b];
    (d_euc > 0.0 && d_geo.is_finite()).then(|| d_geo / d_euc)
}

/// Encodes every step, builds one k-NN geodesic graph over all step latents
/// of `trajectories`, and derives trajectory- and step-level features.
///
/// A single-step trajectory has no pairs: its ρ is 1 and its Fisher–Rao
/// terms are 0.
pub fn analyze(
    trajectories: &[&Trajectory],
    ensemble: &VaeEnsemble,
    geometry: &GeometryConfig,
    patterns: &PatternConfig,
) -> Result<Vec<TrajectoryAnalysis>, PipelineError> {
    patterns.validate()?;
    let encoded = trajectories
        .iter()
        .map(|t| encode_steps(ensemble, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut offsets = Vec::with_capacity(trajectories.len());
    let mut nodes = Vec::new();
    for steps in &encoded {
        offsets.push(nodes.len());
        nodes.extend(steps.iter().map(|s| s.mean.clone()));
    }

    let graph = if nodes.len() >= 2 {
        let k = geometry.k.min(nodes.len() - 1);
        let identity = IdentityMetric {
            dim: ensemble.latent_dim(),
        };
        let pullback = EnsembleMetric {
            ensemble,
            spread: geometry.spread,
            mode: JacobianMode::Analytic,
        };
        let metric: &dyn LatentMetric = match geometry.metric {
            MetricKind::Identity => &identity,
            MetricKind::Pullback => &pullback,
        };
        Some(build_geodesic_graph(&nodes, metric, k, geometry.eps)?)
    } else {
        None
    };

    trajectories
        .par_iter()
        .zip(encoded.par_iter())
        .zip(offsets.par_iter())
        .map(|((t, latents), &offset)| {
            let trace = EntropyTrace::from_trajectory(t)?;
            let temporal = temporal_scores(&trace, patterns);
            let n = latents.len();
            let ids: Vec<usize> = (offset..offset + n).collect();

            let geo = match (&graph, n) {
                (Some(g), n) if n >= 2 => trajectory_geometry(g, &ids, latents, geometry.pairs)?,
                _ => TrajectoryGeometry::new(1.0, 0.0, latents[0].u, 0),
            };

            let mut steps = Vec::with_capacity(n);
            let mut cached: Option<(usize, Vec<f64>)> = None;
            for s in 0..n {
                let (a, b) = if s == 0 { (0, 1) } else { (s - 1, s) };
                let (rho, dfr) = match &graph {
                    Some(g) if n >= 2 => {
                        if cached.as_ref().map(|c| c.0) != Some(a) {
                            cached = Some((a, g.shortest_paths_from(ids[a])));
                        }
                        let dist = &cached.as_ref().unwrap().1;
                        let rho = pair_ratio(g, dist, ids[a], ids[b]).unwrap_or(1.0);
                        (rho, fisher_rao_between(&latents[a], &latents[b])?)
                    }
                    _ => (1.0, 0.0),
                };
                steps.push(StepFeatures {
                    rho,
                    s_temp: temporal[s].s_temp,
                    dfr,
                    u: latents[s].u,
                });
            }

            Ok(TrajectoryAnalysis {
                id: t.id.clone(),
                query: t.query.clone(),
                domain: t.domain_tag,
                step_texts: t.steps.iter().map(|s| s.text.clone()).collect(),
                gold_labels: t.steps.iter().map(|s| s.detector_label).collect(),
                latents: latents.clone(),
                geometry: geo,
                entropy: trace.values,
                temporal,
                steps,
            })
        })
        .collect()
}
