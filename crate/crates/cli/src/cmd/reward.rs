use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use geofaith::reward::{assign_advantages, grpo_loss, reward_flow, FlowConfig, FlowReport, RolloutGroup};

use crate::args::{DetectorArgs, GeometryArgs, PatternArgs, RewardArgs};
use crate::common::{self, Ensembles};
use crate::failure::{Failure, Result};
use crate::output::{read_csv, OutDir};

#[derive(Debug, Args, Serialize)]
pub struct RewardCmdArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint directory; its detector.json is the default baseline
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub weights: RewardArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RewardRow {
    pub traj_id: String,
    pub r_out: f64,
    pub r_proc: f64,
    pub r_ent: f64,
    pub r_mani: f64,
    pub total: f64,
    pub advantage: Option<f64>,
}

pub fn reward(a: &RewardCmdArgs, seed: u64) -> Result<()> {
    let config = FlowConfig {
        weights: a.weights.weights()?,
        patterns: a.patterns.config()?,
        geometry: a.geometry.config()?,
        manifold: a.weights.source(),
    };
    let ds = common::dataset(&a.input)?;
    let ensembles = Ensembles::load(&a.ensemble)?;
    let detector = common::detector(&a.detector, Some(&a.ensemble))?;
    let detector = detector.as_ref();
    let mut reports: Vec<FlowReport> = ds
        .trajectories
        .par_iter()
        .map(|t| {
            let ensemble = ensembles.get(t.domain_tag)?;
            reward_flow(t, &ds.answer_set, Some(ensemble), detector, &config)
                .map_err(|e| Failure::analysis(format!("{}: {e}", t.id)))
        })
        .collect::<Result<_>>()?;
    let queries: Vec<String> = ds.trajectories.iter().map(|t| t.query.clone()).collect();
    assign_advantages(&mut reports, &queries);

    let dir = OutDir::create(&a.out)?;
    dir.write_csv(
        "rewards.csv",
        reports.iter().map(|r| RewardRow {
            traj_id: r.traj_id.clone(),
            r_out: r.breakdown.r_out,
            r_proc: r.breakdown.r_proc,
            r_ent: r.breakdown.r_ent,
            r_mani: r.breakdown.r_mani,
            total: r.breakdown.total,
            advantage: r.breakdown.advantage,
        }),
    )?;
    let mut log = String::new();
    for r in &reports {
        log.push_str(&serde_json::to_string(r).map_err(Failure::usage)?);
        log.push('\n');
    }
    dir.write("reward_steps.jsonl", log.as_bytes())?;
    dir.write_manifest("reward", seed, a)?;
    for r in &reports {
        println!("{}\t{:.6}", r.traj_id, r.breakdown.total);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GrpoArgs {
    /// rewards.csv written by reward
    #[arg(long)]
    pub rewards: PathBuf,
    /// CSV with traj_id, query, logprob, ref_logprob
    #[arg(long)]
    pub rollouts: PathBuf,
    /// KL penalty coefficient
    #[arg(long, default_value_t = 0.01)]
    pub beta_kl: f64,
    /// Directory for grpo_loss.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct RolloutRow {
    traj_id: String,
    query: String,
    logprob: Option<f64>,
    ref_logprob: Option<f64>,
}

#[derive(Serialize)]
struct LossRow {
    query: String,
    rollouts: usize,
    loss: f64,
}

pub fn grpo(a: &GrpoArgs, seed: u64) -> Result<()> {
    if !(a.beta_kl.is_finite() && a.beta_kl >= 0.0) {
        return Err(Failure::usage("--beta-kl must be finite and nonnegative"));
    }
    let rewards: Vec<RewardRow> = read_csv(&a.rewards)?;
    let rollouts: Vec<RolloutRow> = read_csv(&a.rollouts)?;
    let totals: HashMap<&str, f64> = rewards.iter().map(|r| (r.traj_id.as_str(), r.total)).collect();
    let mut order: Vec<&str> = Vec::new();
    for r in &rollouts {
        if !order.contains(&r.query.as_str()) {
            order.push(&r.query);
        }
    }
    let mut rows = Vec::new();
    for q in order {
        let members: Vec<&RolloutRow> = rollouts.iter().filter(|r| r.query == q).collect();
        let mut group = RolloutGroup {
            query: q.to_string(),
            rewards: vec![],
            logprobs: vec![],
            ref_logprobs: vec![],
        };
        for m in &members {
            let total = totals
                .get(m.traj_id.as_str())
                .ok_or_else(|| Failure::analysis(format!("no reward for rollout {}", m.traj_id)))?;
            group.rewards.push(*total);
            group.logprobs.push(m.logprob.unwrap_or(f64::NAN));
            group.ref_logprobs.push(m.ref_logprob.unwrap_or(f64::NAN));
        }
        let loss = grpo_loss(&group, a.beta_kl).map_err(|e| Failure::analysis(format!("query {q}: {e}")))?;
        rows.push(LossRow {
            query: q.to_string(),
            rollouts: members.len(),
            loss,
        });
    }
    println!("query\trollouts\tloss");
    for r in &rows {
        println!("{}\t{}\t{:.6}", r.query, r.rollouts, r.loss);
    }
    if let Some(out) = &a.out {
        let dir = OutDir::create(out)?;
        dir.write_csv("grpo_loss.csv", &rows)?;
        dir.write_manifest("grpo-loss", seed, a)?;
    }
    Ok(())
}
