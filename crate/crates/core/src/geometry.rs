//! Latent-space geometry: pullback metrics, k-NN geodesic graphs, distortion
//! ratios, ensemble uncertainty and Fisher–Rao distances between diagonal
//! Gaussians.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vae::{GaussianPosterior, SpreadParam, TrainedVae, VaeEnsemble, VaeError};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("decoder Jacobian contains non-finite entries")]
    NonFiniteJacobian,
    #[error("graph needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("k = {k} must satisfy 1 <= k < N = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("nodes {0} and {1} are not connected")]
    Disconnected(usize, usize),
    #[error("nodes {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("variances must be positive")]
    NonPositiveVariance,
    #[error("trajectory geometry needs at least two steps")]
    SingleStepTrajectory,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Symmetric PSD metric tensor at one latent point.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackMetric {
    pub g: DMatrix<f64>,
}

impl PullbackMetric {
    /// Average of JᵀJ over the supplied Jacobians.
    pub fn from_jacobians(jacobians: &[DMatrix<f64>]) -> Result<Self, GeometryError> {
        let first = jacobians.first().ok_or(GeometryError::NonFiniteJacobian)?;
        let d = first.ncols();
        let mut g = DMatrix::zeros(d, d);
        for j in jacobians {
            if j.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::NonFiniteJacobian);
            }
            g += j.transpose() * j;
        }
        g /= jacobians.len() as f64;
        // Exact symmetry regardless of accumulation order.
        let g = (&g + g.transpose()) * 0.5;
        Ok(PullbackMetric { g })
    }

    pub fn quadratic_form(&self, delta: &[f64]) -> f64 {
        let n = delta.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += delta[i] * self.g[(i, j)] * delta[j];
            }
        }
        s
    }
}

/// How decoder Jacobians are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum JacobianMode {
    #[default]
    Analytic,
    /// Central differences with the given step.
    FiniteDifference(f64),
}

/// Central-difference Jacobian of the decoder map `z ↦ [μ; spread]`.
pub fn finite_difference_jacobian(
    vae: &TrainedVae,
    z: &[f64],
    spread: SpreadParam,
    step: f64,
) -> Result<DMatrix<f64>, GeometryError> {
    let out = vae.decoder_map(z, spread)?.len();
    let mut jac = DMatrix::zeros(out, z.len());
    let mut zp = z.to_vec();
    for c in 0..z.len() {
        zp[c] = z[c] + step;
        let plus = vae.decoder_map(&zp, spread)?;
        zp[c] = z[c] - step;
        let minus = vae.decoder_map(&zp, spread)?;
        zp[c] = z[c];
        for r in 0..out {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// G(z) = (1/M) Σ_a J_aᵀ J_a over the ensemble's decoders.
pub fn pullback_metric(
    ensemble: &VaeEnsemble,
    z: &[f64],
    spread: SpreadParam,
    mode: JacobianMode,
) -> Result<PullbackMetric, GeometryError> {
    let jacobians = ensemble
        .members
        .iter()
        .map(|m| match mode {
            JacobianMode::Analytic => Ok(m.decoder_jacobian(z, spread)?.jacobian),
            JacobianMode::FiniteDifference(h) => finite_difference_jacobian(m, z, spread, h),
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    PullbackMetric::from_jacobians(&jacobians)
}

/// A Riemannian metric on the latent space.
pub trait LatentMetric: Sync {
    fn dim(&self) -> usize;

    /// ΔᵀG(at)Δ.
    fn squared_length(&self, at: &[f64], delta: &[f64]) -> Result<f64, GeometryError>;
}

/// The flat metric G = I. Its squared length is the plain sum of squares, so
/// edge weights with ε = 0 equal Euclidean distances bit for bit.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMetric {
    pub dim: usize,
}

impl LatentMetric for IdentityMetric {
    fn dim(&self) -> usize {
        self.dim
    }

    fn squared_length(&self, _at: &[f64], delta: &[f64]) -> Result<f64, GeometryError> {
        Ok(squared_norm(delta))
    }
}

/// A position-independent metric.
#[derive(Debug, Clone)]
pub struct ConstantMetric(pub PullbackMetric);

impl LatentMetric for ConstantMetric {
    fn dim(&self) -> usize {
        self.0.g.nrows()
    }

    fn squared_length(&self, _at: &[f64], delta: &[f64]) -> Result<f64, GeometryError> {
        Ok(self.0.quadratic_form(delta))
    }
}

/// Pullback metric of a trained ensemble's decoders.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleMetric<'a> {
    pub ensemble: &'a VaeEnsemble,
    pub spread: SpreadParam,
    pub mode: JacobianMode,
}

impl<'a> EnsembleMetric<'a> {
    pub fn new(ensemble: &'a VaeEnsemble) -> Self {
        EnsembleMetric {
            ensemble,
            spread: SpreadParam::default(),
            mode: JacobianMode::default(),
        }
    }
}

impl LatentMetric for EnsembleMetric<'_> {
    fn dim(&self) -> usize {
        self.ensemble.latent_dim()
    }

    fn squared_length(&self, at: &[f64], delta: &[f64]) -> Result<f64, GeometryError> {
        Ok(pullback_metric(self.ensemble, at, self.spread, self.mode)?.quadratic_form(delta))
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    let delta: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    squared_norm(&delta).sqrt()
}

/// w = √(max(0, ΔᵀG(z̄)Δ) + ε) with Δ = z_j − z_i and z̄ the midpoint.
pub fn edge_weight(zi: &[f64], zj: &[f64], metric: &dyn LatentMetric, eps: f64) -> Result<f64, GeometryError> {
    if zi.len() != metric.dim() || zj.len() != metric.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: metric.dim(),
            got: if zi.len() != metric.dim() { zi.len() } else { zj.len() },
        });
    }
    let delta: Vec<f64> = zj.iter().zip(zi).map(|(b, a)| b - a).collect();
    let mid: Vec<f64> = zi.iter().zip(zj).map(|(a, b)| 0.5 * (a + b)).collect();
    let q = metric.squared_length(&mid, &delta)?;
    Ok((q.max(0.0) + eps).sqrt())
}

/// Undirected weighted graph over latent points.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicGraph {
    pub nodes: Vec<Vec<f64>>,
    /// Neighbor lists sorted by neighbor index.
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub eps: f64,
}

impl GeodesicGraph {
    /// Builds a graph from explicit undirected edges. Later duplicates
    /// overwrite earlier ones.
    pub fn from_edges(nodes: Vec<Vec<f64>>, edges: &[(usize, usize, f64)]) -> Self {
        let n = nodes.len();
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            for (u, v) in [(a, b), (b, a)] {
                match adjacency[u].iter_mut().find(|(x, _)| *x == v) {
                    Some(slot) => slot.1 = w,
                    None => adjacency[u].push((v, w)),
                }
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|(v, _)| *v);
        }
        GeodesicGraph {
            nodes,
            adjacency,
            eps: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.adjacency[i].is_empty()
    }

    pub fn isolated(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_isolated(i)).collect()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i].iter().find(|(v, _)| *v == j).map(|(_, w)| *w)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let mut seen = vec![false; self.len()];
        let mut count = 0;
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    /// Single-source shortest path lengths; unreachable nodes get +∞.
    pub fn shortest_paths_from(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut done = vec![false; self.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Label {
            dist: 0.0,
            node: source,
        });
        while let Some(Label { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Label { dist: nd, node: v });
                }
            }
        }
        dist
    }

    fn check(&self, i: usize) -> Result<(), GeometryError> {
        if i < self.len() {
            Ok(())
        } else {
            Err(GeometryError::NodeOutOfRange(i))
        }
    }
}

/// Heap entry ordered so the smallest distance pops first, then the smallest
/// node index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Label {
    dist: f64,
    node: usize,
}

impl Eq for Label {}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the k nearest points to `i` (Euclidean), ties by index.
fn nearest(latents: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = latents
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, z)| {
            let d: f64 = z.iter().zip(&latents[i]).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Symmetric k-NN graph (union of directed k-NN relations) with metric edge
/// weights.
pub fn build_geodesic_graph(
    latents: &[Vec<f64>],
    metric: &dyn LatentMetric,
    k: usize,
    eps: f64,
) -> Result<GeodesicGraph, GeometryError> {
    let n = latents.len();
    if n < 2 {
        return Err(GeometryError::TooFewPoints { needed: 2, got: n });
    }
    if k == 0 || k >= n {
        return Err(GeometryError::InvalidK { k, n });
    }
    if let Some(bad) = latents.iter().find(|z| z.len() != metric.dim()) {
        return Err(GeometryError::DimensionMismatch {
            expected: metric.dim(),
            got: bad.len(),
        });
    }
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| nearest(latents, i, k).into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let weights = pairs
        .par_iter()
        .map(|&(i, j)| edge_weight(&latents[i], &latents[j], metric, eps))
        .collect::<Result<Vec<_>, _>>()?;
    let edges: Vec<(usize, usize, f64)> = pairs.iter().zip(weights).map(|(&(i, j), w)| (i, j, w)).collect();
    let mut graph = GeodesicGraph::from_edges(latents.to_vec(), &edges);
    graph.eps = eps;
    Ok(graph)
}

pub fn geodesic_distance(graph: &GeodesicGraph, i: usize, j: usize) -> Result<f64, GeometryError> {
    graph.check(i)?;
    graph.check(j)?;
    let d = graph.shortest_paths_from(i)[j];
    if d.is_finite() {
        Ok(d)
    } else {
        Err(GeometryError::Disconnected(i, j))
    }
}

/// ρ = d_geo / d_euc between two graph nodes.
pub fn distortion_ratio(graph: &GeodesicGraph, i: usize, j: usize) -> Result<f64, GeometryError> {
    graph.check(i)?;
    graph.check(j)?;
    let d_euc = euclidean_distance(&graph.nodes[i], &graph.nodes[j]);
    if d_euc == 0.0 {
        return Err(GeometryError::CoincidentPoints(i, j));
    }
    Ok(geodesic_distance(graph, i, j)? / d_euc)
}

/// Ensemble-aggregated latent Gaussian at one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    /// Mean over members of the encoder means; used as the step's latent point.
    pub mean: Vec<f64>,
    /// σ̄_i² = E_a[σ²_(a),i] + Var_a[μ_(a),i] (population variance).
    pub variance: Vec<f64>,
    /// Mean of log σ̄_i².
    pub u: f64,
}

/// Law-of-total-variance aggregation of member posteriors.
pub fn aggregate_posteriors(posteriors: &[GaussianPosterior]) -> Result<UncertaintySummary, GeometryError> {
    let m = posteriors.len();
    let first = posteriors.first().ok_or(GeometryError::NonPositiveVariance)?;
    let d = first.mean.len();
    let mf = m as f64;
    let mut mean = vec![0.0; d];
    let mut variance = vec![0.0; d];
    for p in posteriors {
        if p.mean.len() != d || p.logvar.len() != d {
            return Err(GeometryError::DimensionMismatch {
                expected: d,
                got: p.mean.len(),
            });
        }
        for i in 0..d {
            mean[i] += p.mean[i] / mf;
            variance[i] += p.logvar[i].exp() / mf;
        }
    }
    for p in posteriors {
        for i in 0..d {
            let dev = p.mean[i] - mean[i];
            variance[i] += dev * dev / mf;
        }
    }
    summary(mean, variance)
}

fn summary(mean: Vec<f64>, variance: Vec<f64>) -> Result<UncertaintySummary, GeometryError> {
    if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(GeometryError::NonPositiveVariance);
    }
    let u = variance.iter().map(|v| v.ln()).sum::<f64>() / variance.len() as f64;
    Ok(UncertaintySummary { mean, variance, u })
}

impl UncertaintySummary {
    pub fn from_moments(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, GeometryError> {
        summary(mean, variance)
    }
}

/// Aggregated uncertainty of the ensemble at a raw hidden state.
pub fn total_variance(ensemble: &VaeEnsemble, raw: &[f64]) -> Result<UncertaintySummary, GeometryError> {
    aggregate_posteriors(&ensemble.encode_raw(raw)?)
}

/// Fisher–Rao distance between two diagonal Gaussians given as
/// (means, variances): √(Σ_i 2·arccosh²(V_i)) with
/// V_i = (σ²_a + σ²_b + (μ_a − μ_b)²) / (2 σ_a σ_b), clamped below at 1.
pub fn fisher_rao_distance(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> Result<f64, GeometryError> {
    let d = mean_a.len();
    for len in [var_a.len(), mean_b.len(), var_b.len()] {
        if len != d {
            return Err(GeometryError::DimensionMismatch { expected: d, got: len });
        }
    }
    if var_a.iter().chain(var_b).any(|v| !(*v > 0.0)) {
        return Err(GeometryError::NonPositiveVariance);
    }
    let mut sum = 0.0;
    for i in 0..d {
        let dm = mean_a[i] - mean_b[i];
        let v = (var_a[i] + var_b[i] + dm * dm) / (2.0 * (var_a[i] * var_b[i]).sqrt());
        let a = v.max(1.0).acosh();
        sum += 2.0 * a * a;
    }
    Ok(sum.sqrt())
}

pub fn fisher_rao_between(a: &UncertaintySummary, b: &UncertaintySummary) -> Result<f64, GeometryError> {
    fisher_rao_distance(&a.mean, &a.variance, &b.mean, &b.variance)
}

/// Which within-trajectory step pairs enter the averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSet {
    #[default]
    Consecutive,
    All,
}

impl PairSet {
    pub fn pairs(self, t: usize) -> Vec<(usize, usize)> {
        match self {
            PairSet::Consecutive => (1..t).map(|s| (s - 1, s)).collect(),
            PairSet::All => (0..t).flat_map(|a| ((a + 1)..t).map(move |b| (a, b))).collect(),
        }
    }
}

/// Trajectory-level geometric features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGeometry {
    pub rho: f64,
    pub dfr: f64,
    pub ubar: f64,
    pub contrast: f64,
    /// Pairs that contributed to ρ (coincident or disconnected pairs are skipped).
    pub rho_pairs: usize,
}

impl TrajectoryGeometry {
    pub fn new(rho: f64, dfr: f64, ubar: f64, rho_pairs: usize) -> Self {
        TrajectoryGeometry {
            rho,
            dfr,
            ubar,
            contrast: dfr / ubar.exp(),
            rho_pairs,
        }
    }
}

/// Averages ρ and d_FR over the chosen step pairs and U over steps.
///
/// `nodes[t]` is the graph node of step t and `steps[t]` its aggregated
/// Gaussian. Pairs whose latents coincide or lie in different components
/// carry no distortion information and are skipped; when none remain, ρ
/// defaults to 1 (no detour).
pub fn trajectory_geometry(
    graph: &GeodesicGraph,
    nodes: &[usize],
    steps: &[UncertaintySummary],
    pairs: PairSet,
) -> Result<TrajectoryGeometry, GeometryError> {
    let t = steps.len();
    if nodes.len() != t {
        return Err(GeometryError::DimensionMismatch {
            expected: t,
            got: nodes.len(),
        });
    }
    if t < 2 {
        return Err(GeometryError::SingleStepTrajectory);
    }
    let pair_list = pairs.pairs(t);
    let mut rho_sum = 0.0;
    let mut rho_n = 0usize;
    let mut dfr_sum = 0.0;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; t];
    for &(a, b) in &pair_list {
        dfr_sum += fisher_rao_between(&steps[a], &steps[b])?;
        let d_euc = euclidean_distance(&graph.nodes[nodes[a]], &graph.nodes[nodes[b]]);
        if d_euc == 0.0 {
            continue;
        }
        let dist = cache[a].get_or_insert_with(|| graph.shortest_paths_from(nodes[a]));
        let d_geo = dist[nodes[b]];
        if d_geo.is_finite() {
            rho_sum += d_geo / d_euc;
            rho_n += 1;
        }
    }
    let rho = if rho_n > 0 { rho_sum / rho_n as f64 } else { 1.0 };
    let dfr = dfr_sum / pair_list.len() as f64;
    let ubar = steps.iter().map(|s| s.u).sum::<f64>() / t as f64;
    Ok(TrajectoryGeometry::new(rho, dfr, ubar, rho_n))
}
