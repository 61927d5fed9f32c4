use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use geofaith::pipeline::{
    bootstrap_round, density_cluster, refine_group, AnnotatedStep, BootstrapState, ClusterAssignment, RefineInput,
    TrajectoryAnalysis,
};

use crate::args::{ClusterArgs, DetectorArgs, RefineArgs};
use crate::cmd::data::curve_rows;
use crate::common;
use crate::failure::{Failure, Result};
use crate::output::{read_json, OutDir};

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterFile {
    pub ids: Vec<String>,
    pub assignment: ClusterAssignment,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterCmdArgs {
    /// analysis.json written by geometry
    #[arg(long)]
    pub analysis: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cluster: ClusterArgs,
}

#[derive(Serialize)]
struct ClusterRow<'a> {
    traj_id: &'a str,
    rho: f64,
    contrast: f64,
    rho_std: f64,
    contrast_std: f64,
    cluster: Option<usize>,
    suspicious: bool,
}

pub fn cluster(a: &ClusterCmdArgs, seed: u64) -> Result<()> {
    let config = a.cluster.config()?;
    let analyses: Vec<TrajectoryAnalysis> = read_json(&a.analysis)?;
    if analyses.is_empty() {
        return Err(Failure::analysis("no trajectories to cluster"));
    }
    let features: Vec<[f64; 2]> = analyses.iter().map(|x| [x.geometry.rho, x.geometry.contrast]).collect();
    let assignment = density_cluster(&features, &config);
    let dir = OutDir::create(&a.out)?;
    dir.write_csv(
        "clusters.csv",
        analyses.iter().enumerate().map(|(i, x)| ClusterRow {
            traj_id: &x.id,
            rho: features[i][0],
            contrast: features[i][1],
            rho_std: assignment.standardized[i][0],
            contrast_std: assignment.standardized[i][1],
            cluster: assignment.labels[i],
            suspicious: assignment.suspicious[i],
        }),
    )?;
    let flagged = assignment.suspicious.iter().filter(|s| **s).count();
    eprintln!(
        "{} clusters, {} noise, {flagged} suspicious trajectories",
        assignment.cluster_count(),
        assignment.noise_count()
    );
    let file = ClusterFile {
        ids: analyses.into_iter().map(|x| x.id).collect(),
        assignment,
    };
    dir.write_json("clusters.json", &file)?;
    dir.write_manifest("cluster", seed, a)
}

fn load_pool(analysis: &Path, clusters: &Path) -> Result<(Vec<TrajectoryAnalysis>, ClusterFile)> {
    let analyses: Vec<TrajectoryAnalysis> = read_json(analysis)?;
    let file: ClusterFile = read_json(clusters)?;
    let ids: Vec<&str> = analyses.iter().map(|x| x.id.as_str()).collect();
    if ids != file.ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Failure::usage("cluster file does not match the analysis trajectories"));
    }
    Ok((analyses, file))
}

fn refine_inputs<'a>(analyses: &'a [TrajectoryAnalysis], file: &ClusterFile, all: bool) -> Vec<RefineInput<'a>> {
    analyses
        .iter()
        .enumerate()
        .filter(|(i, _)| all || file.assignment.suspicious[*i])
        .map(|(i, x)| RefineInput {
            analysis: x,
            cluster: file.assignment.labels[i],
        })
        .collect()
}

#[derive(Serialize)]
struct AnnotatedRow<'a> {
    traj_id: &'a str,
    step: usize,
    s_det: f64,
    s_temp: f64,
    s_fused: f64,
    retained: bool,
    label: &'static str,
    round: usize,
    cluster: Option<usize>,
}

fn annotated_rows(steps: &[AnnotatedStep]) -> impl Iterator<Item = AnnotatedRow<'_>> {
    steps.iter().map(|s| AnnotatedRow {
        traj_id: &s.traj_id,
        step: s.step,
        s_det: s.s_det,
        s_temp: s.s_temp,
        s_fused: s.s_fused,
        retained: s.retained,
        label: s.label.as_str(),
        round: s.round,
        cluster: s.cluster,
    })
}

#[derive(Debug, Args, Serialize)]
pub struct RefineCmdArgs {
    #[arg(long)]
    pub analysis: PathBuf,
    /// clusters.json written by cluster
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Refine every trajectory, not only suspicious ones
    #[arg(long)]
    pub all: bool,
    /// Round number recorded on the annotations
    #[arg(long, default_value_t = 1)]
    pub round: usize,
    #[command(flatten)]
    pub refine: RefineArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

pub fn refine(a: &RefineCmdArgs, seed: u64) -> Result<()> {
    let config = a.refine.config()?;
    let (analyses, file) = load_pool(&a.analysis, &a.clusters)?;
    let detector = common::detector(&a.detector, None)?;
    let inputs = refine_inputs(&analyses, &file, a.all);
    let steps = refine_group(&inputs, detector.as_ref(), &config, a.round)?;
    let dir = OutDir::create(&a.out)?;
    dir.write_csv("annotated.csv", annotated_rows(&steps))?;
    dir.write_manifest("refine", seed, a)?;
    let kept = steps.iter().filter(|s| s.retained).count();
    eprintln!(
        "refined {} trajectories: {kept} of {} steps retained",
        inputs.len(),
        steps.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub analysis: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    /// State from the previous round; omitted for the first round
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub refine: RefineArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

pub fn bootstrap(a: &BootstrapArgs, seed: u64) -> Result<()> {
    let config = a.refine.config()?;
    let (analyses, file) = load_pool(&a.analysis, &a.clusters)?;
    let state: BootstrapState = match &a.state {
        Some(p) => read_json(p)?,
        None => BootstrapState::default(),
    };
    let detector = common::detector(&a.detector, None)?;
    let inputs = refine_inputs(&analyses, &file, false);
    let (next, steps) = bootstrap_round(&state, &inputs, detector.as_ref(), &config)?;
    let dir = OutDir::create(&a.out)?;
    dir.write_json("bootstrap_state.json", &next)?;
    dir.write_csv("annotated.csv", annotated_rows(&steps))?;
    dir.write_manifest("bootstrap", seed, a)?;
    eprintln!(
        "round {}: added {} samples, {} total",
        next.round,
        next.len() - state.len(),
        next.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub analysis: PathBuf,
    /// clusters.json; adds cluster and suspicion columns to the scatter
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Dataset directory; adds the explained-variance curve
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub k_max: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    traj_id: &'a str,
    step: usize,
    entropy: f64,
    s_temp: f64,
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    traj_id: &'a str,
    rho: f64,
    contrast: f64,
    cluster: Option<usize>,
    suspicious: Option<bool>,
}

fn scatter_svg(points: &[(f64, f64, bool)]) -> String {
    let (w, h, pad) = (480.0, 360.0, 40.0);
    let span = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = span(points.iter().map(|p| p.0).collect());
    let (y0, y1) = span(points.iter().map(|p| p.1).collect());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">distortion ratio</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">contrast</text>"#,
        h / 2.0,
        h / 2.0
    );
    for &(x, y, flagged) in points {
        let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let color = if flagged { "#c0392b" } else { "#2c7fb8" };
        let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_data(a: &PlotArgs, seed: u64) -> Result<()> {
    let analyses: Vec<TrajectoryAnalysis> = read_json(&a.analysis)?;
    let clusters: Option<ClusterFile> = match &a.clusters {
        Some(p) => {
            let (_, f) = load_pool(&a.analysis, p)?;
            Some(f)
        }
        None => None,
    };
    let dir = OutDir::create(&a.out)?;
    dir.write_csv(
        "entropy_curves.csv",
        analyses.iter().flat_map(|x| {
            x.entropy.iter().enumerate().map(|(t, &e)| CurveRow {
                traj_id: &x.id,
                step: t,
                entropy: e,
                s_temp: x.steps[t].s_temp,
            })
        }),
    )?;
    let scatter: Vec<ScatterRow> = analyses
        .iter()
        .enumerate()
        .map(|(i, x)| ScatterRow {
            traj_id: &x.id,
            rho: x.geometry.rho,
            contrast: x.geometry.contrast,
            cluster: clusters.as_ref().and_then(|c| c.assignment.labels[i]),
            suspicious: clusters.as_ref().map(|c| c.assignment.suspicious[i]),
        })
        .collect();
    let svg_points: Vec<(f64, f64, bool)> = scatter
        .iter()
        .map(|r| (r.rho, r.contrast, r.suspicious.unwrap_or(false)))
        .collect();
    dir.write_csv("rho_contrast.csv", &scatter)?;
    dir.write("rho_contrast.svg", scatter_svg(&svg_points).as_bytes())?;
    if let Some(input) = &a.input {
        let ds = common::dataset(input)?;
        dir.write_csv("variance_curve.csv", curve_rows(&ds, a.k_max)?)?;
    }
    dir.write_manifest("plot-data", seed, a)
}
