//! Predictive-entropy dynamics along a reasoning trace.
//!
//! Steps are indexed from 0. A penalty whose window would reach before the
//! first step evaluates to 0: flatness and oscillation need `t >= window`,
//! spike needs `t >= 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_store::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("invalid answer distribution: {0}")]
    InvalidDistribution(String),
    #[error("trajectory {0} carries no answer distributions (K = 0)")]
    NoAnswerDistribution(String),
    #[error("invalid pattern config: {0}")]
    InvalidConfig(String),
}

/// Shannon entropy (natural log) of a distribution, renormalized first.
/// Zero-probability entries contribute nothing.
pub fn predictive_entropy(dist: &[f64]) -> Result<f64, EntropyError> {
    if dist.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(EntropyError::InvalidDistribution("negative or non-finite entry".into()));
    }
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return Err(EntropyError::InvalidDistribution("zero total mass".into()));
    }
    Ok(dist
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Per-step entropies H_0..H_{T-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub values: Vec<f64>,
}

impl EntropyTrace {
    pub fn new(values: Vec<f64>) -> Self {
        EntropyTrace { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_trajectory(t: &Trajectory) -> Result<Self, EntropyError> {
        let mut values = Vec::with_capacity(t.steps.len());
        for step in &t.steps {
            if step.answer_dist.is_empty() {
                return Err(EntropyError::NoAnswerDistribution(t.id.clone()));
            }
            let dist: Vec<f64> = step.answer_dist.iter().map(|&p| p as f64).collect();
            values.push(predictive_entropy(&dist)?);
        }
        Ok(EntropyTrace { values })
    }

    fn delta(&self, k: usize) -> f64 {
        self.values[k] - self.values[k - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub window: usize,
    pub theta_flat: f64,
    pub tau_spike: f64,
    /// Weights of the flatness, spike and oscillation penalties.
    pub weights: [f64; 3],
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig {
            window: 5,
            theta_flat: 0.1,
            tau_spike: 1.0,
            weights: [0.2, 0.3, 0.5],
        }
    }
}

impl PatternConfig {
    pub fn validate(&self) -> Result<(), EntropyError> {
        if self.window < 2 {
            return Err(EntropyError::InvalidConfig("window must be >= 2".into()));
        }
        if !(self.theta_flat > 0.0 && self.tau_spike > 0.0) {
            return Err(EntropyError::InvalidConfig("thresholds must be positive".into()));
        }
        if self.weights.iter().any(|w| *w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EntropyError::InvalidConfig(
                "penalty weights must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// 1 when the mean absolute entropy change over the last `window` steps is
/// strictly below `theta_flat`.
pub fn flatness(trace: &EntropyTrace, t: usize, config: &PatternConfig) -> u8 {
    let w = config.window;
    if t < w || t >= trace.len() {
        return 0;
    }
    let mean = ((t + 1 - w)..=t).map(|k| trace.delta(k).abs()).sum::<f64>() / w as f64;
    u8::from(mean < config.theta_flat)
}

/// 1 when the latest entropy change strictly exceeds `tau_spike` in magnitude.
pub fn spike(trace: &EntropyTrace, t: usize, config: &PatternConfig) -> u8 {
    if t < 1 || t >= trace.len() {
        return 0;
    }
    u8::from(trace.delta(t).abs() > config.tau_spike)
}

/// Fraction of sign reversals between consecutive entropy changes inside the
/// window, normalized by `window - 1`.
pub fn oscillation(trace: &EntropyTrace, t: usize, config: &PatternConfig) -> f64 {
    let w = config.window;
    if t < w || t >= trace.len() {
        return 0.0;
    }
    let flips = ((t + 2 - w)..=t)
        .filter(|&k| trace.delta(k) * trace.delta(k - 1) < 0.0)
        .count();
    flips as f64 / (w - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTemporalScore {
    pub p_flat: u8,
    pub p_spike: u8,
    pub p_osc: f64,
    pub p_ent: f64,
    pub s_temp: f64,
}

impl StepTemporalScore {
    pub fn from_penalties(p_flat: u8, p_spike: u8, p_osc: f64, config: &PatternConfig) -> Self {
        let [w1, w2, w3] = config.weights;
        let p_ent = w1 * p_flat as f64 + w2 * p_spike as f64 + w3 * p_osc;
        StepTemporalScore {
            p_flat,
            p_spike,
            p_osc,
            p_ent,
            s_temp: 1.0 - p_ent,
        }
    }
}

pub fn temporal_score(trace: &EntropyTrace, t: usize, config: &PatternConfig) -> StepTemporalScore {
    StepTemporalScore::from_penalties(
        flatness(trace, t, config),
        spike(trace, t, config),
        oscillation(trace, t, config),
        config,
    )
}

/// Temporal scores for every step of a trace.
pub fn temporal_scores(trace: &EntropyTrace, config: &PatternConfig) -> Vec<StepTemporalScore> {
    (0..trace.len()).map(|t| temporal_score(trace, t, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn from_deltas(start: f64, deltas: &[f64]) -> EntropyTrace {
        let mut v = vec![start];
        for d in deltas {
            v.push(v.last().unwrap() + d);
        }
        EntropyTrace::new(v)
    }

    #[test]
    fn entropy_examples() {
        assert_relative_eq!(predictive_entropy(&[0.25; 4]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            predictive_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(predictive_entropy(&[0.5, -0.1, 0.6]).is_err());
        assert!(predictive_entropy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn flatness_cases() {
        let cfg = PatternConfig::default();
        let flat = EntropyTrace::new(vec![0.7; 8]);
        assert_eq!(flatness(&flat, 5, &cfg), 1);
        let moving = from_deltas(2.0, &[-0.2; 5]);
        assert_eq!(flatness(&moving, 5, &cfg), 0);
        let late = from_deltas(1.0, &[0.0, 0.0, 0.0, 0.0, 0.4]);
        assert_eq!(flatness(&late, 5, &cfg), 1);
        // Not enough history yet.
        assert_eq!(flatness(&flat, 4, &cfg), 0);
    }

    #[test]
    fn spike_cases() {
        let cfg = PatternConfig::default();
        assert_eq!(spike(&EntropyTrace::new(vec![0.25, 1.75]), 1, &cfg), 1);
        assert_eq!(spike(&EntropyTrace::new(vec![0.5, 1.5]), 1, &cfg), 0);
        assert_eq!(spike(&EntropyTrace::new(vec![1.5, 0.3]), 1, &cfg), 1);
        assert_eq!(spike(&EntropyTrace::new(vec![1.5, 0.3]), 0, &cfg), 0);
    }

    #[test]
    fn oscillation_cases() {
        let cfg = PatternConfig::default();
        let alt = from_deltas(1.0, &[0.5, -0.5, 0.5, -0.5, 0.5]);
        assert_eq!(oscillation(&alt, 5, &cfg), 1.0);
        let mono = from_deltas(3.0, &[-0.3; 6]);
        assert_eq!(oscillation(&mono, 6, &cfg), 0.0);
        let mixed = from_deltas(1.0, &[1.0, 1.0, 1.0, -1.0, 1.0]);
        assert_eq!(oscillation(&mixed, 5, &cfg), 0.5);
    }

    #[test]
    fn temporal_score_cases() {
        let cfg = PatternConfig::default();
        assert_relative_eq!(
            StepTemporalScore::from_penalties(1, 0, 0.0, &cfg).s_temp,
            0.8,
            epsilon = 1e-15
        );
        assert_eq!(StepTemporalScore::from_penalties(0, 0, 0.0, &cfg).s_temp, 1.0);
        assert_relative_eq!(
            StepTemporalScore::from_penalties(1, 1, 1.0, &cfg).s_temp,
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn config_validation() {
        assert!(PatternConfig::default().validate().is_ok());
        for c in [
            PatternConfig {
                window: 1,
                ..PatternConfig::default()
            },
            PatternConfig {
                weights: [0.2, 0.3, 0.6],
                ..PatternConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    fn grid_trace() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..40).prop_map(|v| v as f64 / 8.0), 1..20)
    }

    proptest! {
        #[test]
        fn s_temp_is_bounded(values in grid_trace(), w in 2usize..7) {
            let cfg = PatternConfig { window: w, ..PatternConfig::default() };
            let trace = EntropyTrace::new(values);
            for s in temporal_scores(&trace, &cfg) {
                prop_assert!((0.0..=1.0).contains(&s.s_temp));
            }
        }

        #[test]
        fn penalties_are_shift_invariant(values in grid_trace(), shift in -16i32..16) {
            let cfg = PatternConfig::default();
            let a = EntropyTrace::new(values.clone());
            let b = EntropyTrace::new(values.iter().map(|v| v + shift as f64 / 8.0).collect());
            prop_assert_eq!(temporal_scores(&a, &cfg), temporal_scores(&b, &cfg));
        }

        #[test]
        fn steady_monotone_traces_are_fully_reliable(
            steps in prop::collection::vec(0.11f64..=1.0, 1..15),
            up in any::<bool>(),
        ) {
            let cfg = PatternConfig::default();
            let deltas: Vec<f64> = steps.iter().map(|d| if up { *d } else { -*d }).collect();
            let trace = from_deltas(20.0, &deltas);
            for s in temporal_scores(&trace, &cfg) {
                prop_assert_eq!(s.s_temp, 1.0);
            }
        }

        #[test]
        fn entropy_is_bounded_by_log_k(raw in prop::collection::vec(0.0f64..1.0, 2..10)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let h = predictive_entropy(&raw).unwrap();
            let k = raw.len() as f64;
            prop_assert!(h <= k.ln() + 1e-9);
            let total: f64 = raw.iter().sum();
            let uniform = raw.iter().all(|p| (p / total - 1.0 / k).abs() < 1e-12);
            if !uniform && (k.ln() - h).abs() < 1e-9 {
                // Only numerically indistinguishable-from-uniform inputs may reach the bound.
                prop_assert!(raw.iter().all(|p| (p / total - 1.0 / k).abs() < 1e-4));
            }
        }
    }
}
