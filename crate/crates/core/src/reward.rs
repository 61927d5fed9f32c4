//! Hierarchical reward composition and the group-relative policy loss.

use std::str::FromStr;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{EntropyTrace, PatternConfig, StepTemporalScore};
use crate::geometry::total_variance;
use crate::pipeline::{analyze, Detector, DetectorRequest, GeometryConfig};
use crate::trace_store::{DomainTag, FaithLabel, Trajectory};
use crate::vae::VaeEnsemble;

pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("missing answer")]
    MissingAnswer,
    #[error("no steps to score")]
    EmptySteps,
    #[error("step {0} carries no binary faithfulness label")]
    UnlabeledStep(usize),
    #[error("no trained ensemble available")]
    UntrainedEnsemble,
    #[error("group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("rollout {0} has no usable log-probability")]
    MissingLogProb(usize),
    #[error("reward weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("{stage} stage failed: {reason}")]
    Stage { stage: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub outcome: f64,
    pub process: f64,
    pub entropy: f64,
    pub manifold: f64,
    pub beta_kl: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            outcome: 1.0,
            process: 0.5,
            entropy: 0.3,
            manifold: 0.2,
            beta_kl: 0.01,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let all = [self.outcome, self.process, self.entropy, self.manifold, self.beta_kl];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(RewardError::InvalidWeights)
        }
    }
}

/// Answer comparison rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    /// Case-insensitive comparison after trimming and collapsing whitespace.
    Exact,
    /// Numeric equality of integers, decimals or fractions; falls back to
    /// `Exact` when either side is not a number.
    Rational,
}

impl Matcher {
    pub fn for_domain(domain: DomainTag) -> Self {
        match domain {
            DomainTag::Math => Matcher::Rational,
            _ => Matcher::Exact,
        }
    }
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_rational(s: &str) -> Option<BigRational> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if let Some((int, frac)) = s.split_once('.') {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let digits = format!("{int}{frac}");
        let denom = format!("1{}", "0".repeat(frac.len()));
        return BigRational::from_str(&format!("{digits}/{denom}")).ok();
    }
    BigRational::from_str(&s).ok()
}

pub fn answers_match(predicted: &str, gold: &str, matcher: Matcher) -> bool {
    if matcher == Matcher::Rational {
        if let (Some(a), Some(b)) = (parse_rational(predicted), parse_rational(gold)) {
            return a == b;
        }
    }
    normalize_answer(predicted) == normalize_answer(gold)
}

/// +1 for a correct final answer, −1 otherwise.
pub fn outcome_reward(predicted: &str, gold: &str, matcher: Matcher) -> Result<f64, RewardError> {
    if predicted.trim().is_empty() || gold.trim().is_empty() {
        return Err(RewardError::MissingAnswer);
    }
    Ok(if answers_match(predicted, gold, matcher) {
        1.0
    } else {
        -1.0
    })
}

/// Mean of +1 (faithful) / −1 (unfaithful) step rewards.
pub fn process_reward(labels: &[FaithLabel]) -> Result<f64, RewardError> {
    if labels.is_empty() {
        return Err(RewardError::EmptySteps);
    }
    let mut sum = 0.0;
    for (i, l) in labels.iter().enumerate() {
        sum += match l {
            FaithLabel::Faithful => 1.0,
            FaithLabel::Unfaithful => -1.0,
            FaithLabel::Uncertain => return Err(RewardError::UnlabeledStep(i)),
        };
    }
    Ok(sum / labels.len() as f64)
}

/// Mean temporal reliability over steps.
pub fn entropy_reward(scores: &[StepTemporalScore]) -> Result<f64, RewardError> {
    if scores.is_empty() {
        return Err(RewardError::EmptySteps);
    }
    Ok(scores.iter().map(|s| s.s_temp).sum::<f64>() / scores.len() as f64)
}

/// −U(z) for a raw hidden state.
pub fn manifold_reward(ensemble: Option<&VaeEnsemble>, hidden: &[f64]) -> Result<f64, RewardError> {
    let ensemble = ensemble.ok_or(RewardError::UntrainedEnsemble)?;
    let summary = total_variance(ensemble, hidden).map_err(|e| RewardError::Stage {
        stage: "manifold",
        reason: e.to_string(),
    })?;
    Ok(-summary.u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub r_out: f64,
    pub r_proc: f64,
    pub r_ent: f64,
    pub r_mani: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_out: f64,
    pub r_proc: f64,
    pub r_ent: f64,
    pub r_mani: f64,
    pub total: f64,
    /// Group-normalized advantage, once known.
    pub advantage: Option<f64>,
}

/// λ₁R_out + λ₂R_proc + λ₃R_ent + λ₄R_mani, summed in that order.
pub fn total_reward(c: &RewardComponents, w: &RewardWeights) -> RewardBreakdown {
    let total = w.outcome * c.r_out + w.process * c.r_proc + w.entropy * c.r_ent + w.manifold * c.r_mani;
    RewardBreakdown {
        r_out: c.r_out,
        r_proc: c.r_proc,
        r_ent: c.r_ent,
        r_mani: c.r_mani,
        total,
        advantage: None,
    }
}

/// (R_i − mean) / (population std + 1e-8).
pub fn group_normalize(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    let b = rewards.len();
    if b < 2 {
        return Err(RewardError::GroupTooSmall(b));
    }
    let mean = rewards.iter().sum::<f64>() / b as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / b as f64;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query: String,
    pub rewards: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
}

/// −mean(Â·log π) + β_KL·mean(log π − log π_ref).
pub fn grpo_loss_from_advantages(
    advantages: &[f64],
    logprobs: &[f64],
    ref_logprobs: &[f64],
    beta_kl: f64,
) -> Result<f64, RewardError> {
    let b = advantages.len();
    if b == 0 {
        return Err(RewardError::GroupTooSmall(0));
    }
    for i in 0..b {
        let ok = |v: Option<&f64>| v.is_some_and(|x| x.is_finite());
        if !ok(logprobs.get(i)) || !ok(ref_logprobs.get(i)) {
            return Err(RewardError::MissingLogProb(i));
        }
    }
    let policy = advantages.iter().zip(logprobs).map(|(a, l)| a * l).sum::<f64>() / b as f64;
    let kl = logprobs.iter().zip(ref_logprobs).map(|(l, r)| l - r).sum::<f64>() / b as f64;
    Ok(-policy + beta_kl * kl)
}

pub fn grpo_loss(group: &RolloutGroup, beta_kl: f64) -> Result<f64, RewardError> {
    let adv = group_normalize(&group.rewards)?;
    grpo_loss_from_advantages(&adv, &group.logprobs, &group.ref_logprobs, beta_kl)
}

/// Which latent feeds the manifold reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldSource {
    /// The final step's hidden state.
    #[default]
    FinalStep,
    /// −U averaged over all steps.
    MeanOverSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowConfig {
    pub weights: RewardWeights,
    pub patterns: PatternConfig,
    pub geometry: GeometryConfig,
    pub manifold: ManifoldSource,
}

/// Per-step audit record of the reward flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub step: usize,
    pub entropy: f64,
    /// −log P(gold answer); absent when the gold answer is not a candidate.
    pub self_information: Option<f64>,
    pub s_det: f64,
    pub label: FaithLabel,
    pub s_temp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub traj_id: String,
    pub breakdown: RewardBreakdown,
    pub steps: Vec<FlowStep>,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> RewardError {
    move |e| RewardError::Stage {
        stage,
        reason: e.to_string(),
    }
}

/// Scores one trajectory end to end: outcome check, entropy trace and answer
/// self-information, detector step labels and process reward, manifold
/// reward from the final hidden state, temporal scores and entropy reward,
/// then the weighted total. Step-level geometry uses a graph over this
/// trajectory's own steps.
pub fn reward_flow(
    trajectory: &Trajectory,
    answer_set: &[String],
    ensemble: Option<&VaeEnsemble>,
    detector: &dyn Detector,
    config: &FlowConfig,
) -> Result<FlowReport, RewardError> {
    let matcher = Matcher::for_domain(trajectory.domain_tag);
    let r_out = outcome_reward(&trajectory.predicted_answer, &trajectory.gold_answer, matcher)?;

    let trace = EntropyTrace::from_trajectory(trajectory).map_err(stage("entropy"))?;
    let gold_index = answer_set
        .iter()
        .position(|a| answers_match(a, &trajectory.gold_answer, matcher));

    let ensemble = ensemble.ok_or(RewardError::UntrainedEnsemble)?;
    let analysis = analyze(&[trajectory], ensemble, &config.geometry, &config.patterns)
        .map_err(stage("geometry"))?
        .remove(0);

    let mut steps = Vec::with_capacity(trajectory.len());
    for (t, step) in trajectory.steps.iter().enumerate() {
        let req = DetectorRequest {
            traj_id: &trajectory.id,
            step: t,
            query: &trajectory.query,
            steps: &analysis.step_texts[..=t],
            features: analysis.steps[t],
        };
        let s_det = detector.score(&req).map_err(stage("detector"))?;
        let self_information = gold_index.map(|g| {
            let total: f64 = step.answer_dist.iter().map(|&p| p as f64).sum();
            -(step.answer_dist[g] as f64 / total).ln()
        });
        steps.push(FlowStep {
            step: t,
            entropy: trace.values[t],
            self_information,
            s_det,
            label: if s_det > 0.5 {
                FaithLabel::Faithful
            } else {
                FaithLabel::Unfaithful
            },
            s_temp: analysis.temporal[t].s_temp,
        });
    }
    let labels: Vec<FaithLabel> = steps.iter().map(|s| s.label).collect();
    let r_proc = process_reward(&labels)?;

    let r_mani = match config.manifold {
        ManifoldSource::FinalStep => -analysis.latents.last().ok_or(RewardError::EmptySteps)?.u,
        ManifoldSource::MeanOverSteps => {
            -analysis.latents.iter().map(|l| l.u).sum::<f64>() / analysis.latents.len() as f64
        }
    };
    let r_ent = entropy_reward(&analysis.temporal)?;
    let breakdown = total_reward(
        &RewardComponents {
            r_out,
            r_proc,
            r_ent,
            r_mani,
        },
        &config.weights,
    );
    Ok(FlowReport {
        traj_id: trajectory.id.clone(),
        breakdown,
        steps,
    })
}

/// Attaches group-normalized advantages, grouping by query. Groups with a
/// single rollout get advantage 0.
pub fn assign_advantages(reports: &mut [FlowReport], queries: &[String]) {
    let mut order: Vec<String> = Vec::new();
    for q in queries {
        if !order.contains(q) {
            order.push(q.clone());
        }
    }
    for q in order {
        let idx: Vec<usize> = (0..reports.len()).filter(|&i| queries[i] == q).collect();
        let rewards: Vec<f64> = idx.iter().map(|&i| reports[i].breakdown.total).collect();
        let adv = group_normalize(&rewards).unwrap_or_else(|_| vec![0.0; idx.len()]);
        for (i, a) in idx.into_iter().zip(adv) {
            reports[i].breakdown.advantage = Some(a);
        }
    }
}
