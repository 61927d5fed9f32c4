//! Deterministic synthetic datasets used as bundled fixtures and test inputs.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::trace_store::{Dataset, DomainTag, FaithLabel, Step, Trajectory};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// An `ambient × intrinsic` matrix with orthonormal columns (QR of a Gaussian
/// matrix, signs fixed so the diagonal of R is positive).
pub fn orthonormal_embedding(rng: &mut ChaCha8Rng, ambient: usize, intrinsic: usize) -> DMatrix<f64> {
    assert!(intrinsic <= ambient);
    let g = DMatrix::from_fn(ambient, intrinsic, |_, _| gaussian(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..intrinsic {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `n` points uniform on the unit `d`-cube, rotated into `ambient` dimensions.
pub fn hypercube_points(n: usize, d: usize, ambient: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormal_embedding(&mut rng, ambient, d);
    let cube = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    cube * q.transpose()
}

/// `n` points spanning a random rank-`rank` subspace of `ambient` dimensions
/// with per-direction scales `3, 2.8, ...` plus isotropic noise.
pub fn low_rank_points(n: usize, rank: usize, ambient: usize, noise: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormal_embedding(&mut rng, ambient, rank);
    let coeffs = DMatrix::from_fn(n, rank, |_, j| (3.0 - 0.2 * j as f64) * gaussian(&mut rng));
    let mut x = coeffs * q.transpose();
    for v in x.iter_mut() {
        *v += noise * gaussian(&mut rng);
    }
    x
}

/// A K-way answer distribution with natural-log entropy `h`, of the form
/// p_j ∝ exp(−b·j). Index 0 carries the most mass.
pub fn dist_with_entropy(k: usize, h: f64) -> Vec<f32> {
    assert!(k >= 2 && (0.0..(k as f64).ln()).contains(&h));
    let probs = |b: f64| {
        let w: Vec<f64> = (0..k).map(|j| (-b * j as f64).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let entropy = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy(&probs(mid)) > h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut p: Vec<f32> = probs(0.5 * (lo + hi)).into_iter().map(|x| x as f32).collect();
    let rest: f32 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

fn step(index: usize, text: String, hidden: Vec<f64>, dist: Vec<f32>, label: Option<FaithLabel>) -> Step {
    Step {
        index,
        text,
        hidden_state: hidden.into_iter().map(|v| v as f32).collect(),
        answer_dist: dist,
        detector_label: label,
    }
}

/// Point on a circle of radius `r` in the plane spanned by the first two
/// columns of `q`, plus isotropic noise.
fn ring_point(q: &DMatrix<f64>, r: f64, theta: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, s) = (r * theta.cos(), r * theta.sin());
    (0..q.nrows())
        .map(|i| c * q[(i, 0)] + s * q[(i, 1)] + noise * gaussian(rng))
        .collect()
}

/// Twelve short trajectories on a 2-D plane in 8 dimensions, four answers.
pub fn flat2d(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormal_embedding(&mut rng, 8, 2);
    let answers: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
    let mut ds = Dataset::new(8, answers.clone());
    for i in 0..12 {
        let t_len = 4 + i % 3;
        let start = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let dir = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let faithful = i % 3 != 2;
        let steps = (0..t_len)
            .map(|t| {
                let u = [start[0] + dir[0] * t as f64, start[1] + dir[1] * t as f64];
                let hidden = (0..8).map(|r| u[0] * q[(r, 0)] + u[1] * q[(r, 1)]).collect();
                let h = 1.3 - 0.2 * t as f64;
                let label = if faithful {
                    FaithLabel::Faithful
                } else {
                    FaithLabel::Unfaithful
                };
                step(
                    t,
                    format!("Step {t} of trajectory {i}."),
                    hidden,
                    dist_with_entropy(4, h),
                    Some(label),
                )
            })
            .collect();
        ds.trajectories.push(Trajectory {
            id: format!("flat-{i:02}"),
            query: format!("q{}", i / 4),
            steps,
            gold_answer: "A".into(),
            predicted_answer: if faithful { "A" } else { "C" }.into(),
            domain_tag: DomainTag::Synthetic,
            layer_index: 12,
        });
    }
    ds
}

/// Uniform samples on a unit square rotated into 16 dimensions, packaged as
/// 40 trajectories of 25 steps without answer distributions.
pub fn cube2d(seed: u64) -> Dataset {
    let pts = hypercube_points(1000, 2, 16, seed);
    let mut ds = Dataset::new(16, vec![]);
    for i in 0..40 {
        let steps = (0..25)
            .map(|t| {
                let row = pts.row(i * 25 + t).iter().copied().collect();
                step(t, format!("s{t}"), row, vec![], None)
            })
            .collect();
        ds.trajectories.push(Trajectory {
            id: format!("cube-{i:02}"),
            query: format!("q{i}"),
            steps,
            gold_answer: "x".into(),
            predicted_answer: "x".into(),
            domain_tag: DomainTag::Synthetic,
            layer_index: 0,
        });
    }
    ds
}

/// Shape of one planted population.
#[derive(Debug, Clone, Copy)]
struct Population {
    arc: f64,
    faithful: bool,
}

pub const PLANTED_STEPS: usize = 8;
pub const PLANTED_QUERIES: usize = 10;
pub const PLANTED_FAITHFUL_PER_QUERY: usize = 3;
pub const PLANTED_UNFAITHFUL_PER_QUERY: usize = 2;

fn planted_entropy(faithful: bool, variant: usize, t: usize) -> f64 {
    if faithful {
        1.30 - 0.15 * t as f64
    } else if variant % 2 == 0 {
        // Flat: changes stay well under the flatness threshold.
        0.80 + 0.02 * (t % 2) as f64
    } else {
        // Oscillating: the change flips sign at every step.
        if t % 2 == 0 {
            0.50
        } else {
            1.10
        }
    }
}

/// Two populations of trajectories on a noisy ring in 16 dimensions.
///
/// Faithful trajectories sweep a wide arc with steadily falling entropy.
/// Unfaithful ones stay on a short arc with flat or oscillating entropy, which
/// gives them a lower distortion ratio and a smaller contrast. Every step carries its population's
/// label and ids start with `faithful-` or `unfaithful-`.
pub fn planted(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormal_embedding(&mut rng, 16, 2);
    let answers: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
    let mut ds = Dataset::new(16, answers);
    let faithful = Population {
        arc: 1.2 * PI,
        faithful: true,
    };
    let unfaithful = Population {
        arc: 0.3,
        faithful: false,
    };
    let (mut nf, mut nu) = (0, 0);
    for qi in 0..PLANTED_QUERIES {
        let pops = std::iter::repeat(faithful)
            .take(PLANTED_FAITHFUL_PER_QUERY)
            .chain(std::iter::repeat(unfaithful).take(PLANTED_UNFAITHFUL_PER_QUERY));
        for pop in pops {
            let (id, variant) = if pop.faithful {
                nf += 1;
                (format!("faithful-{:02}", nf - 1), nf - 1)
            } else {
                nu += 1;
                (format!("unfaithful-{:02}", nu - 1), nu - 1)
            };
            let start = rng.random_range(0.0..2.0 * PI);
            let label = if pop.faithful {
                FaithLabel::Faithful
            } else {
                FaithLabel::Unfaithful
            };
            let steps = (0..PLANTED_STEPS)
                .map(|t| {
                    let theta = start + pop.arc * t as f64 / (PLANTED_STEPS - 1) as f64;
                    let hidden = ring_point(&q, 3.0, theta, 0.02, &mut rng);
                    let h = planted_entropy(pop.faithful, variant, t);
                    step(
                        t,
                        format!("{id} step {t}"),
                        hidden,
                        dist_with_entropy(4, h),
                        Some(label),
                    )
                })
                .collect();
            ds.trajectories.push(Trajectory {
                id,
                query: format!("q{qi:02}"),
                steps,
                gold_answer: "A".into(),
                predicted_answer: if pop.faithful { "A" } else { "B" }.into(),
                domain_tag: DomainTag::Synthetic,
                layer_index: 16,
            });
        }
    }
    ds
}

/// Policy and reference log-probabilities for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub traj_id: String,
    pub query: String,
    pub logprob: f64,
    pub ref_logprob: f64,
}

/// A math-tagged dataset of two queries with three rollouts each, plus
/// matching rollout log-probabilities for the policy loss.
pub fn golden(seed: u64) -> (Dataset, Vec<RolloutRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthonormal_embedding(&mut rng, 8, 2);
    let answers: Vec<String> = ["1/2", "3/4", "2", "5"].map(String::from).to_vec();
    let mut ds = Dataset::new(8, answers);
    let mut rollouts = Vec::new();
    let predictions = [["0.5", "1/2", "3/4"], ["2", "2.0", "5"]];
    let golds = ["1/2", "2"];
    for (qi, preds) in predictions.iter().enumerate() {
        for (ri, pred) in preds.iter().enumerate() {
            let id = format!("g{qi}-r{ri}");
            let start = rng.random_range(0.0..2.0 * PI);
            let arc = [2.0, 1.0, 0.3][ri];
            let steps = (0..6)
                .map(|t| {
                    let hidden = ring_point(&q, 2.0, start + arc * t as f64 / 5.0, 0.05, &mut rng);
                    let h = match ri {
                        0 => 1.3 - 0.2 * t as f64,
                        1 => 1.0 - 0.05 * t as f64,
                        _ => [0.4, 1.2][t % 2],
                    };
                    step(t, format!("{id} step {t}"), hidden, dist_with_entropy(4, h), None)
                })
                .collect();
            ds.trajectories.push(Trajectory {
                id: id.clone(),
                query: format!("golden-q{qi}"),
                steps,
                gold_answer: golds[qi].into(),
                predicted_answer: (*pred).into(),
                domain_tag: DomainTag::Math,
                layer_index: 20,
            });
            let logprob = -(rng.random_range(5.0..40.0_f64) * 1000.0).round() / 1000.0;
            let ref_logprob = logprob - (rng.random_range(-0.5..0.5_f64) * 1000.0).round() / 1000.0;
            rollouts.push(RolloutRecord {
                traj_id: id,
                query: format!("golden-q{qi}"),
                logprob,
                ref_logprob,
            });
        }
    }
    (ds, rollouts)
}
