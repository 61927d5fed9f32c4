use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use geofaith::entropy::{temporal_scores, EntropyTrace};
use geofaith::pipeline::{train_baseline, BootstrapState, DetectorTraining, StepFeatures, TrajectoryAnalysis};
use geofaith::trace_store::{DomainTag, FaithLabel, Trajectory};
use geofaith::vae::{save_ensemble, train_ensemble, VaeEnsemble};

use crate::args::{GeometryArgs, PatternArgs, VaeArgs};
use crate::common::{self, Ensembles};
use crate::failure::{Failure, Result};
use crate::output::{read_json, OutDir};

#[derive(Debug, Args, Serialize)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint directory; one subdirectory per domain unless --pool
    #[arg(long)]
    pub out: PathBuf,
    /// Train a single ensemble on all domains
    #[arg(long)]
    pub pool: bool,
    #[command(flatten)]
    pub vae: VaeArgs,
}

#[derive(Serialize)]
struct LogRow {
    member: usize,
    epoch: usize,
    beta: f64,
    learning_rate: f64,
    train_loss: f64,
    val_total: f64,
    val_recon: f64,
    val_kl: f64,
}

fn write_ensemble(ensemble: &VaeEnsemble, dir: &OutDir, sub: Option<&str>) -> Result<()> {
    let (root, prefix) = match sub {
        Some(s) => (dir.path(s), format!("{s}/")),
        None => (dir.path(""), String::new()),
    };
    save_ensemble(ensemble, &root)?;
    let rows = ensemble.members.iter().enumerate().flat_map(|(m, vae)| {
        vae.log.epochs.iter().map(move |e| LogRow {
            member: m,
            epoch: e.epoch,
            beta: e.beta,
            learning_rate: e.learning_rate,
            train_loss: e.train_loss,
            val_total: e.val_total,
            val_recon: e.val_recon,
            val_kl: e.val_kl,
        })
    });
    dir.write_csv(&format!("{prefix}training_log.csv"), rows)
}

pub fn train_vae(a: &TrainVaeArgs, seed: u64) -> Result<()> {
    let config = a.vae.config(seed)?;
    let ds = common::dataset(&a.input)?;
    let dir = OutDir::create(&a.out)?;
    let groups: Vec<(Option<DomainTag>, Vec<&Trajectory>)> = if a.pool {
        vec![(None, ds.trajectories.iter().collect())]
    } else {
        DomainTag::ALL
            .iter()
            .map(|d| {
                (
                    Some(*d),
                    ds.trajectories
                        .iter()
                        .filter(|t| t.domain_tag == *d)
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, ts)| !ts.is_empty())
            .collect()
    };
    for (domain, ts) in groups {
        let x = common::stacked_states(ts, ds.ambient_dim);
        let name = domain.map_or("pooled", DomainTag::as_str);
        eprintln!(
            "training {} member(s) for {name} on {} states",
            a.vae.members,
            x.nrows()
        );
        let ensemble = train_ensemble(&x, &config, a.vae.members)?;
        for (m, vae) in ensemble.members.iter().enumerate() {
            let last = vae.log.epochs.last().map_or(f64::NAN, |e| e.val_total);
            eprintln!(
                "  member {m}: {} epochs, validation loss {last:.4}",
                vae.log.epochs.len()
            );
        }
        write_ensemble(&ensemble, &dir, domain.map(DomainTag::as_str))?;
    }
    dir.write_manifest("train-vae", seed, a)
}

#[derive(Debug, Args, Serialize)]
pub struct GeometryCmdArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint directory written by train-vae
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

#[derive(Serialize)]
struct GeometryRow<'a> {
    traj_id: &'a str,
    domain: &'a str,
    rho: f64,
    dfr: f64,
    ubar: f64,
    contrast: f64,
    rho_pairs: usize,
}

#[derive(Serialize)]
struct StepRow<'a> {
    traj_id: &'a str,
    step: usize,
    rho: f64,
    s_temp: f64,
    dfr: f64,
    u: f64,
}

pub fn geometry(a: &GeometryCmdArgs, seed: u64) -> Result<()> {
    let geometry = a.geometry.config()?;
    let patterns = a.patterns.config()?;
    let ds = common::dataset(&a.input)?;
    let ensembles = Ensembles::load(&a.ensemble)?;
    let analyses = common::analyze_dataset(&ds, &ensembles, &geometry, &patterns)?;
    let dir = OutDir::create(&a.out)?;
    dir.write_json("analysis.json", &analyses)?;
    dir.write_csv(
        "geometry.csv",
        analyses.iter().map(|x| GeometryRow {
            traj_id: &x.id,
            domain: x.domain.as_str(),
            rho: x.geometry.rho,
            dfr: x.geometry.dfr,
            ubar: x.geometry.ubar,
            contrast: x.geometry.contrast,
            rho_pairs: x.geometry.rho_pairs,
        }),
    )?;
    dir.write_csv(
        "steps.csv",
        analyses.iter().flat_map(|x| {
            x.steps.iter().enumerate().map(|(t, f)| StepRow {
                traj_id: &x.id,
                step: t,
                rho: f.rho,
                s_temp: f.s_temp,
                dfr: f.dfr,
                u: f.u,
            })
        }),
    )?;
    dir.write_manifest("geometry", seed, a)?;
    eprintln!("analyzed {} trajectories", analyses.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EntropyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

#[derive(Serialize)]
struct EntropyRow<'a> {
    traj_id: &'a str,
    step: usize,
    entropy: f64,
    p_flat: u8,
    p_spike: u8,
    p_osc: f64,
    p_ent: f64,
    s_temp: f64,
}

pub fn entropy(a: &EntropyArgs, seed: u64) -> Result<()> {
    let patterns = a.patterns.config()?;
    let ds = common::dataset(&a.input)?;
    let mut rows = Vec::new();
    for t in &ds.trajectories {
        let trace = EntropyTrace::from_trajectory(t).map_err(|e| Failure::analysis(format!("{}: {e}", t.id)))?;
        let scores = temporal_scores(&trace, &patterns);
        for (i, s) in scores.iter().enumerate() {
            rows.push(EntropyRow {
                traj_id: &t.id,
                step: i,
                entropy: trace.values[i],
                p_flat: s.p_flat,
                p_spike: s.p_spike,
                p_osc: s.p_osc,
                p_ent: s.p_ent,
                s_temp: s.s_temp,
            });
        }
    }
    let dir = OutDir::create(&a.out)?;
    dir.write_csv("entropy.csv", &rows)?;
    dir.write_manifest("entropy", seed, a)?;
    eprintln!("scored {} steps", rows.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDetectorArgs {
    /// analysis.json written by geometry
    #[arg(long)]
    pub analysis: PathBuf,
    /// Bootstrap state whose samples join the seed labels
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Directory for detector.json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
}

/// Seed samples are the steps carrying a faithful or unfaithful label;
/// bootstrapped samples add steps not already labeled.
pub fn training_samples(analyses: &[TrajectoryAnalysis], state: Option<&BootstrapState>) -> Vec<(StepFeatures, bool)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for a in analyses {
        for (t, label) in a.gold_labels.iter().enumerate() {
            let y = match label {
                Some(FaithLabel::Faithful) => true,
                Some(FaithLabel::Unfaithful) => false,
                _ => continue,
            };
            seen.insert((a.id.as_str(), t));
            out.push((a.steps[t], y));
        }
    }
    for s in state.map(|s| s.samples.as_slice()).unwrap_or_default() {
        let Some(a) = analyses.iter().find(|a| a.id == s.traj_id) else {
            continue;
        };
        if s.step < a.steps.len() && seen.insert((a.id.as_str(), s.step)) {
            out.push((a.steps[s.step], s.label == FaithLabel::Faithful));
        }
    }
    out
}

pub fn train_detector(a: &TrainDetectorArgs, seed: u64) -> Result<()> {
    if a.iterations == 0 || !(a.learning_rate > 0.0) || !(a.l2 >= 0.0) {
        return Err(Failure::usage(
            "iterations and learning rate must be positive, l2 nonnegative",
        ));
    }
    let analyses: Vec<TrajectoryAnalysis> = read_json(&a.analysis)?;
    let state: Option<BootstrapState> = a.state.as_ref().map(|p| read_json(p)).transpose()?;
    let samples = training_samples(&analyses, state.as_ref());
    let cfg = DetectorTraining {
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        l2: a.l2,
    };
    let det = train_baseline(&samples, &cfg)?;
    let dir = OutDir::create(&a.out)?;
    dir.write("detector.json", det.to_json().as_bytes())?;
    dir.write_manifest("train-detector", seed, a)?;
    eprintln!("trained on {} labeled steps", samples.len());
    Ok(())
}
