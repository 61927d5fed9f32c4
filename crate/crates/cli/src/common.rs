use std::path::Path;

use nalgebra::DMatrix;

use geofaith::entropy::PatternConfig;
use geofaith::pipeline::{analyze, BaselineDetector, Detector, GeometryConfig, ProcessDetector, TrajectoryAnalysis};
use geofaith::trace_store::{load_dataset, Dataset, DomainTag, Trajectory};
use geofaith::vae::{load_ensemble, VaeEnsemble, ENSEMBLE_FILE};

use crate::args::{DetectorArgs, DetectorKind};
use crate::failure::{Failure, Result};

pub fn dataset(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Failure::usage(format!("{}: no such dataset directory", path.display())));
    }
    Ok(load_dataset(path)?)
}

/// All step hidden states of `trajectories`, one row per step.
pub fn stacked_states<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>, dim: usize) -> DMatrix<f64> {
    let rows: Vec<&[f32]> = trajectories
        .into_iter()
        .flat_map(|t| t.steps.iter().map(|s| s.hidden_state.as_slice()))
        .collect();
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] as f64)
}

/// Either one ensemble for every domain, or one per domain tag in
/// `<dir>/<domain>/`.
pub enum Ensembles {
    Pooled(VaeEnsemble),
    PerDomain(Vec<(DomainTag, VaeEnsemble)>),
}

impl Ensembles {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("{}: no such ensemble directory", dir.display())));
        }
        if dir.join(ENSEMBLE_FILE).is_file() {
            return Ok(Ensembles::Pooled(load_ensemble(dir)?));
        }
        let mut found = Vec::new();
        for d in DomainTag::ALL {
            let sub = dir.join(d.as_str());
            if sub.join(ENSEMBLE_FILE).is_file() {
                found.push((d, load_ensemble(&sub)?));
            }
        }
        if found.is_empty() {
            return Err(Failure::usage(format!("{}: no {ENSEMBLE_FILE} found", dir.display())));
        }
        Ok(Ensembles::PerDomain(found))
    }

    pub fn get(&self, domain: DomainTag) -> Result<&VaeEnsemble> {
        match self {
            Ensembles::Pooled(e) => Ok(e),
            Ensembles::PerDomain(v) => v
                .iter()
                .find(|(d, _)| *d == domain)
                .map(|(_, e)| e)
                .ok_or_else(|| Failure::analysis(format!("no trained ensemble for domain {domain}"))),
        }
    }
}

/// Analyzes every trajectory, building one latent graph per ensemble.
/// Results keep dataset order.
pub fn analyze_dataset(
    ds: &Dataset,
    ensembles: &Ensembles,
    geometry: &GeometryConfig,
    patterns: &PatternConfig,
) -> Result<Vec<TrajectoryAnalysis>> {
    let groups: Vec<Vec<usize>> = match ensembles {
        Ensembles::Pooled(_) => vec![(0..ds.trajectories.len()).collect()],
        Ensembles::PerDomain(_) => DomainTag::ALL
            .iter()
            .map(|d| {
                (0..ds.trajectories.len())
                    .filter(|&i| ds.trajectories[i].domain_tag == *d)
                    .collect()
            })
            .collect(),
    };
    let mut out: Vec<Option<TrajectoryAnalysis>> = vec![None; ds.trajectories.len()];
    for idx in groups.into_iter().filter(|g| !g.is_empty()) {
        let ensemble = ensembles.get(ds.trajectories[idx[0]].domain_tag)?;
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &ds.trajectories[i]).collect();
        for (i, a) in idx.into_iter().zip(analyze(&refs, ensemble, geometry, patterns)?) {
            out[i] = Some(a);
        }
    }
    Ok(out.into_iter().map(|a| a.expect("every trajectory analyzed")).collect())
}

/// Builds the configured detector. A baseline without explicit weights
/// falls back to `detector.json` in `fallback_dir`.
pub fn detector(args: &DetectorArgs, fallback_dir: Option<&Path>) -> Result<Box<dyn Detector>> {
    match args.detector {
        DetectorKind::Baseline => {
            let path = match (&args.detector_weights, fallback_dir) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join("detector.json"),
                (None, None) => {
                    return Err(Failure::usage(
                        "--detector-weights is required for the baseline detector",
                    ))
                }
            };
            let text =
                std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Ok(Box::new(BaselineDetector::from_json(&text).map_err(Failure::usage)?))
        }
        DetectorKind::Process => {
            let cmd = args
                .detector_cmd
                .as_deref()
                .ok_or_else(|| Failure::usage("--detector-cmd is required for the process detector"))?;
            Ok(Box::new(
                ProcessDetector::spawn(cmd, &args.detector_args).map_err(Failure::usage)?,
            ))
        }
    }
}
