use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use geofaith::spectral::{explained_variance, pca_fit, twonn_estimate};
use geofaith::synth;
use geofaith::trace_store::{inspect_dataset, write_dataset, Inspection};

use crate::common;
use crate::failure::{Failure, Result};
use crate::output::OutDir;

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Dataset directory
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for validation.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ValidationEntry {
    id: String,
    status: &'static str,
    problems: Vec<String>,
}

pub fn validate(a: &ValidateArgs, seed: u64) -> Result<()> {
    if !a.input.is_dir() {
        return Err(Failure::usage(format!(
            "{}: no such dataset directory",
            a.input.display()
        )));
    }
    let found = inspect_dataset(&a.input)?;
    let mut entries = Vec::with_capacity(found.len());
    for (id, outcome) in found {
        let (status, problems) = match outcome {
            Inspection::Decoded(r) if r.is_empty() => ("ok", vec![]),
            Inspection::Decoded(r) => ("invalid", r.violations.iter().map(ToString::to_string).collect()),
            Inspection::Unreadable(reason) => ("unreadable", vec![reason]),
        };
        println!("{id}\t{status}\t{}", problems.join("; "));
        entries.push(ValidationEntry { id, status, problems });
    }
    let bad = entries.iter().filter(|e| e.status != "ok").count();
    println!("{} trajectories, {bad} with problems", entries.len());
    if let Some(out) = &a.out {
        let dir = OutDir::create(out)?;
        dir.write_json("validation.json", &entries)?;
        dir.write_manifest("validate", seed, a)?;
    }
    if bad > 0 {
        return Err(Failure::analysis(format!("{bad} trajectories failed validation")));
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Largest rank reported (capped at the hidden dimension)
    #[arg(long, default_value_t = 50)]
    pub k_max: usize,
    /// Directory for variance_curve.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct CurveRow {
    pub k: usize,
    pub eigenvalue: f64,
    pub ratio: f64,
}

pub fn curve_rows(ds: &geofaith::trace_store::Dataset, k_max: usize) -> Result<Vec<CurveRow>> {
    let x = common::stacked_states(&ds.trajectories, ds.ambient_dim);
    let curve = explained_variance(&x, k_max.clamp(1, ds.ambient_dim))?;
    Ok(curve
        .ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| CurveRow {
            k: i + 1,
            eigenvalue: curve.eigenvalues[i],
            ratio,
        })
        .collect())
}

pub fn pca(a: &PcaArgs, seed: u64) -> Result<()> {
    let ds = common::dataset(&a.input)?;
    let rows = curve_rows(&ds, a.k_max)?;
    println!("k\teigenvalue\tVR");
    for r in &rows {
        println!("{}\t{:.6e}\t{:.6}", r.k, r.eigenvalue, r.ratio);
    }
    if let Some(out) = &a.out {
        let dir = OutDir::create(out)?;
        dir.write_csv("variance_curve.csv", &rows)?;
        dir.write_manifest("pca", seed, a)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TwoNnArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Project onto this many principal components before estimating
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Directory for twonn.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TwoNnRow {
    layer: u32,
    points: usize,
    retained: usize,
    d_hat: f64,
}

pub fn twonn(a: &TwoNnArgs, seed: u64) -> Result<()> {
    let ds = common::dataset(&a.input)?;
    let mut layers: BTreeMap<u32, Vec<&geofaith::trace_store::Trajectory>> = BTreeMap::new();
    for t in &ds.trajectories {
        layers.entry(t.layer_index).or_default().push(t);
    }
    let mut rows = Vec::new();
    for (layer, ts) in layers {
        let mut x = common::stacked_states(ts, ds.ambient_dim);
        if let Some(p) = a.pca_dim {
            let (pca, _) = pca_fit(&x, p)?;
            x = pca.transform_rows(&x);
        }
        let est = twonn_estimate(&x)?;
        rows.push(TwoNnRow {
            layer,
            points: x.nrows(),
            retained: est.n_retained,
            d_hat: est.d_hat,
        });
    }
    println!("layer\tpoints\tretained\td_hat");
    for r in &rows {
        println!("{}\t{}\t{}\t{:.4}", r.layer, r.points, r.retained, r.d_hat);
    }
    if let Some(out) = &a.out {
        let dir = OutDir::create(out)?;
        dir.write_csv("twonn.csv", &rows)?;
        dir.write_manifest("twonn", seed, a)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// 12 trajectories on a plane in 8 dimensions
    Flat2d,
    /// Unit-square samples in 16 dimensions
    Cube2d,
    /// Two planted populations on a ring
    Planted,
    /// Math-tagged rollout groups with log-probabilities (rollouts.csv)
    Golden,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Dataset directory to write
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let dir = OutDir::create(&a.out)?;
    let ds = match a.kind {
        SynthKind::Flat2d => synth::flat2d(seed),
        SynthKind::Cube2d => synth::cube2d(seed),
        SynthKind::Planted => synth::planted(seed),
        SynthKind::Golden => {
            let (ds, rollouts) = synth::golden(seed);
            dir.write_csv("rollouts.csv", &rollouts)?;
            ds
        }
    };
    write_dataset(&ds, &a.out)?;
    dir.write_manifest("synth", seed, a)?;
    eprintln!("wrote {} trajectories to {}", ds.trajectories.len(), a.out.display());
    Ok(())
}
