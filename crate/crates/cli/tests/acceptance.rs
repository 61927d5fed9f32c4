//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion, with the
//! individual checks indented beneath it.
//!
//! A check listed in `KNOWN_UNATTAINABLE` is expected to fail and is reported
//! as such without failing the run. Any other failure, or a listed check that
//! starts passing, makes the process exit non-zero.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use geofaith::entropy::{temporal_score, EntropyTrace, PatternConfig};
use geofaith::geometry::{
    build_geodesic_graph, distortion_ratio, fisher_rao_distance, GeodesicGraph, IdentityMetric, DEFAULT_EPS,
};
use geofaith::pipeline::{
    analyze, bootstrap_round, density_cluster, train_baseline, BaselineDetector, BootstrapState, ClusterConfig,
    DetectorTraining, GeometryConfig, RefineConfig, RefineInput, StepFeatures, TrajectoryAnalysis,
};
use geofaith::reward::{
    assign_advantages, group_normalize, grpo_loss_from_advantages, reward_flow, total_reward, FlowConfig,
    RewardComponents, RewardWeights,
};
use geofaith::spectral::{explained_variance, twonn_estimate};
use geofaith::synth::{hypercube_points, low_rank_points};
use geofaith::trace_store::{load_dataset, FaithLabel, Trajectory};
use geofaith::vae::{kl_weight, load_ensemble, train_vae, Preprocess, TrainedVae, VaeConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// (criterion, check) pairs that cannot hold together with the rest of the
/// contract. The closed-form Fisher–Rao distance is pinned by the worked
/// value √2·arccosh(2); it is the geodesic distance of ds² = 2(dμ² + dσ²)/σ²,
/// not of the line element ds² = dμ²/σ² + 2dσ²/σ², so it cannot also match a
/// numerical integration of the latter.
const KNOWN_UNATTAINABLE: &[(&str, &str)] = &[("Fisher–Rao suite", "matches integrated line element dμ²/σ² + 2dσ²/σ²")];

const TWONN_REL_TOL: f64 = 0.15;
const TWONN_BUDGET: Duration = Duration::from_secs(30);
const PCA_MIN_VR5: f64 = 0.95;
const PCA_BUDGET: Duration = Duration::from_secs(5);
const GRAD_REL_TOL: f64 = 1e-4;
const VAE_BUDGET: Duration = Duration::from_secs(120);
const CIRCLE_REL_TOL: f64 = 0.05;
const FR_INTEGRATION_TOL: f64 = 1e-3;
const FR_WORKED_TOL: f64 = 1e-4;
const STEMP_TOL: f64 = 1e-12;
const PLANTED_MIN_PRECISION: f64 = 0.9;
const PLANTED_MIN_RECALL: f64 = 0.9;
const ADVANTAGE_TOL: f64 = 1e-4;
const E2E_BUDGET: Duration = Duration::from_secs(600);

type Criterion = (&'static str, fn() -> Vec<Check>);

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    root().join("fixtures")
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("TwoNN recovery", twonn_recovery),
        ("PCA concentration", pca_concentration),
        ("VAE gradient suite", vae_suite),
        ("Geodesic correctness", geodesic_correctness),
        ("Fisher–Rao suite", fisher_rao_suite),
        ("Entropy-pattern truth table", entropy_truth_table),
        ("Planted geometric separation", planted_separation),
        ("Bootstrapping", bootstrapping),
        ("Reward replay", reward_replay),
        ("End-to-end pipeline", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = 0;
    let mut passed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let checks = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            vec![check("completes", false, format!("panicked: {msg}"))]
        });
        let ok = checks.iter().all(|c| c.pass);
        passed += usize::from(ok);
        let failing: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        let summary = if ok {
            format!("{} checks", checks.len())
        } else {
            format!(
                "{} of {} checks failed: {}",
                failing.len(),
                checks.len(),
                failing.join("; ")
            )
        };
        println!(
            "{} {name}: {summary} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for c in &checks {
            let known = KNOWN_UNATTAINABLE.contains(&(*name, c.name.as_str()));
            let tag = match (c.pass, known) {
                (true, false) => "ok",
                (false, true) => "known-unattainable",
                (false, false) => {
                    unexpected += 1;
                    "FAILED"
                }
                (true, true) => {
                    unexpected += 1;
                    "UNEXPECTEDLY PASSED"
                }
            };
            println!("    [{tag}] {}: {}", c.name, c.detail);
        }
    }
    println!(
        "acceptance: {passed}/{} criteria pass; {} known-unattainable; {unexpected} unexpected",
        criteria.len(),
        KNOWN_UNATTAINABLE.len()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

/// On a bounded cube the estimator runs low as d grows (about 12% at d = 10
/// in expectation), so single draws sit close to the tolerance. Every case
/// uses the tool's default seed.
fn twonn_recovery() -> Vec<Check> {
    [2usize, 5, 10]
        .iter()
        .map(|&d| {
            let points = hypercube_points(5000, d, 64, 0);
            let start = Instant::now();
            let est = twonn_estimate(&points).expect("estimate");
            let took = start.elapsed();
            let rel = (est.d_hat - d as f64).abs() / d as f64;
            check(
                format!("d = {d}"),
                rel <= TWONN_REL_TOL && took < TWONN_BUDGET,
                format!(
                    "d̂ = {:.4} (rel. error {:.3}), {:.2}s",
                    est.d_hat,
                    rel,
                    took.as_secs_f64()
                ),
            )
        })
        .collect()
}

fn pca_concentration() -> Vec<Check> {
    let points = low_rank_points(2000, 5, 256, 0.05, 7);
    let start = Instant::now();
    let curve = explained_variance(&points, 256).expect("spectrum");
    let took = start.elapsed();
    let vr5 = curve.ratios[4];
    let monotone = curve.ratios.windows(2).all(|w| w[1] >= w[0]);
    vec![
        check("VR(5) ≥ 0.95", vr5 >= PCA_MIN_VR5, format!("VR(5) = {vr5:.5}")),
        check("VR monotone", monotone, format!("{} ranks", curve.ratios.len())),
        check(
            "runtime < 5 s",
            took < PCA_BUDGET,
            format!("{:.2}s", took.as_secs_f64()),
        ),
    ]
}

// ---------------------------------------------------------------------------

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Largest per-tensor relative L2 error between the analytic gradient and
/// central differences of the batch loss.
fn gradient_error(vae: &TrainedVae, x: &DMatrix<f64>, e: &DMatrix<f64>, beta: f64) -> f64 {
    let (grad, _) = vae.gradient(x, beta, e).expect("gradient");
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = vae.clone();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; a.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + h;
            let up = probe.batch_loss(x, beta, e).total;
            probe.tensors_mut()[ti][i] = orig - h;
            let down = probe.batch_loss(x, beta, e).total;
            probe.tensors_mut()[ti][i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|q| q * q).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&fd).map(|(p, q)| p - q).collect();
        let scale = norm(a).max(norm(&fd));
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

fn gaussian_mixture(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = normal_matrix(3, d, &mut rng) * 3.0;
    DMatrix::from_fn(n, d, |i, j| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        centers[(i % 3, j)] + 0.5 * noise
    })
}

fn vae_suite() -> Vec<Check> {
    let start = Instant::now();
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for seed in [21u64, 22, 23] {
        let cfg = VaeConfig {
            input_dim: 6,
            hidden_widths: vec![5, 4],
            latent_dim: 3,
            seed,
            ..VaeConfig::default()
        };
        let vae = TrainedVae::initialize(cfg, Preprocess::identity(6)).expect("init");
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = normal_matrix(6, 4, &mut rng);
        let e = normal_matrix(3, 4, &mut rng);
        worst = worst.max(gradient_error(&vae, &x, &e, 0.35));
    }
    checks.push(check(
        "analytic gradient vs central differences",
        worst < GRAD_REL_TOL,
        format!("max relative error {worst:.2e} over all tensors, 3 instances"),
    ));

    let defaults = VaeConfig::default();
    let schedule_exact = (1..=defaults.max_epochs).all(|t| {
        let want = 0.5 * (t as f64 / 20.0).min(1.0);
        kl_weight(t, &defaults) == want
    });
    checks.push(check(
        "warmup schedule exact at every epoch",
        schedule_exact && kl_weight(10, &defaults) == 0.25 && kl_weight(20, &defaults) == 0.5,
        format!("β₁₀ = {}, β₂₀ = {}", kl_weight(10, &defaults), kl_weight(20, &defaults)),
    ));

    let data = gaussian_mixture(600, 16, 5);
    let cfg = VaeConfig {
        input_dim: 16,
        hidden_widths: vec![32, 16],
        latent_dim: 4,
        max_epochs: 40,
        batch_size: 64,
        seed: 9,
        ..VaeConfig::default()
    };
    let vae = train_vae(&data, &cfg).expect("training");
    let log = &vae.log.epochs;
    let logged_betas = log.iter().all(|r| r.beta == kl_weight(r.epoch, &cfg));
    checks.push(check(
        "logged β follows the schedule",
        logged_betas && !log.is_empty(),
        format!("{} epochs logged", log.len()),
    ));
    let (first, last) = (
        log.first().expect("epoch").val_total,
        log.last().expect("epoch").val_total,
    );
    checks.push(check(
        "validation loss falls from epoch 1 to final",
        last < first,
        format!("{first:.4} -> {last:.4}"),
    ));
    let took = start.elapsed();
    checks.push(check(
        "total < 2 min",
        took < VAE_BUDGET,
        format!("{:.1}s", took.as_secs_f64()),
    ));
    checks
}

// ---------------------------------------------------------------------------

/// Minimum over all simple paths from `s` to `t`, by exhaustive enumeration.
fn enumerate_paths(adj: &[Vec<(usize, f64)>], s: usize, t: usize) -> f64 {
    fn walk(adj: &[Vec<(usize, f64)>], u: usize, t: usize, acc: f64, seen: &mut [bool], best: &mut f64) {
        if u == t {
            *best = best.min(acc);
            return;
        }
        for &(v, w) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                walk(adj, v, t, acc + w, seen, best);
                seen[v] = false;
            }
        }
    }
    let mut seen = vec![false; adj.len()];
    seen[s] = true;
    let mut best = f64::INFINITY;
    walk(adj, s, t, 0.0, &mut seen, &mut best);
    best
}

fn geodesic_correctness() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let integer = rng.random_bool(0.3);
        let mut edges = Vec::new();
        let mut adj = vec![Vec::new(); n];
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(0.45) {
                    let w = if integer {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(0.0..5.0)
                    };
                    edges.push((a, b, w));
                    adj[a].push((b, w));
                    adj[b].push((a, w));
                }
            }
        }
        let g = GeodesicGraph::from_edges(vec![vec![0.0]; n], &edges);
        for s in 0..n {
            let dist = g.shortest_paths_from(s);
            for (t, d) in dist.iter().enumerate() {
                compared += 1;
                if d.to_bits() != enumerate_paths(&adj, s, t).to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    let mut checks = vec![check(
        "Dijkstra equals path enumeration (200 graphs, ≤ 8 nodes)",
        mismatches == 0,
        format!("{mismatches} mismatches in {compared} pairs"),
    )];

    let mut below = 0;
    let mut pairs = 0;
    let mut min_rho = f64::INFINITY;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let g = build_geodesic_graph(&pts, &IdentityMetric { dim: 3 }, 4, DEFAULT_EPS).expect("graph");
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                if let Ok(rho) = distortion_ratio(&g, i, j) {
                    pairs += 1;
                    min_rho = min_rho.min(rho);
                    if rho < 1.0 {
                        below += 1;
                    }
                }
            }
        }
    }
    checks.push(check(
        "identity-metric ρ ≥ 1 on connected pairs",
        below == 0 && pairs > 0,
        format!("{pairs} pairs, min ρ = {min_rho:.6}"),
    ));

    let n = 200;
    let circle: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            vec![a.cos(), a.sin()]
        })
        .collect();
    let g = build_geodesic_graph(&circle, &IdentityMetric { dim: 2 }, 2, DEFAULT_EPS).expect("circle graph");
    let rho = distortion_ratio(&g, 0, n / 2).expect("antipodal pair");
    let target = std::f64::consts::FRAC_PI_2;
    checks.push(check(
        "circle antipodal ρ within 5% of π/2",
        (rho - target).abs() / target <= CIRCLE_REL_TOL,
        format!("ρ = {rho:.5}"),
    ));
    checks
}

// ---------------------------------------------------------------------------

/// Geodesic distance for ds² = a·dμ²/σ² + b·dσ²/σ², by shooting on the
/// geodesic equations in (μ, log σ) with RK4 and damped Newton.
fn shooting_distance(a: f64, b: f64, from: (f64, f64), to: (f64, f64)) -> Option<f64> {
    let (s0, s1) = (from.1.ln(), to.1.ln());
    let steps = 2000;
    let end = |v: [f64; 2]| -> [f64; 2] {
        let rhs = |y: [f64; 4]| -> [f64; 4] {
            [
                y[2],
                y[3],
                2.0 * y[2] * y[3],
                -(a / b) * (-2.0 * y[1]).exp() * y[2] * y[2],
            ]
        };
        let mut y = [from.0, s0, v[0], v[1]];
        let h = 1.0 / steps as f64;
        for _ in 0..steps {
            let k1 = rhs(y);
            let k2 = rhs(std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]));
            let k3 = rhs(std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]));
            let k4 = rhs(std::array::from_fn(|i| y[i] + h * k3[i]));
            for i in 0..4 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        [y[0] - to.0, y[1] - s1]
    };
    let norm = |r: [f64; 2]| r[0].hypot(r[1]);
    let mut v = [to.0 - from.0, s1 - s0];
    let mut r = end(v);
    for _ in 0..200 {
        if norm(r) < 1e-11 {
            return Some((a * (-2.0 * s0).exp() * v[0] * v[0] + b * v[1] * v[1]).sqrt());
        }
        let h = 1e-7;
        let c0 = end([v[0] + h, v[1]]);
        let c1 = end([v[0], v[1] + h]);
        let j = [
            [(c0[0] - r[0]) / h, (c1[0] - r[0]) / h],
            [(c0[1] - r[1]) / h, (c1[1] - r[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let dv = [
            (j[1][1] * r[0] - j[0][1] * r[1]) / det,
            (-j[1][0] * r[0] + j[0][0] * r[1]) / det,
        ];
        let mut t = 1.0;
        loop {
            let cand = [v[0] - t * dv[0], v[1] - t * dv[1]];
            let rc = end(cand);
            if norm(rc) < norm(r) || t < 1e-6 {
                v = cand;
                r = rc;
                break;
            }
            t *= 0.5;
        }
    }
    None
}

fn fisher_rao_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut asymmetric = 0;
    let mut nonzero_self = 0;
    for _ in 0..200 {
        let d = rng.random_range(1..6);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (ma, va, mb, vb) = (draw(-3.0, 3.0), draw(0.05, 4.0), draw(-3.0, 3.0), draw(0.05, 4.0));
        let ab = fisher_rao_distance(&ma, &va, &mb, &vb).expect("distance");
        let ba = fisher_rao_distance(&mb, &vb, &ma, &va).expect("distance");
        asymmetric += usize::from(ab.to_bits() != ba.to_bits());
        nonzero_self += usize::from(fisher_rao_distance(&ma, &va, &ma, &va).expect("distance") != 0.0);
    }
    let worked = fisher_rao_distance(&[0.0], &[1.0], &[2f64.sqrt()], &[1.0]).expect("worked value");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut unsolved = 0;
    for _ in 0..100 {
        let p = (rng.random_range(-1.5..1.5), rng.random_range(0.4..2.5));
        let q = (rng.random_range(-1.5..1.5), rng.random_range(0.4..2.5));
        let closed = fisher_rao_distance(&[p.0], &[p.1 * p.1], &[q.0], &[q.1 * q.1]).expect("distance");
        match shooting_distance(1.0, 2.0, p, q) {
            Some(oracle) => worst = worst.max((closed - oracle).abs()),
            None => unsolved += 1,
        }
    }

    vec![
        check(
            "symmetric exactly",
            asymmetric == 0,
            format!("{asymmetric} of 200 asymmetric"),
        ),
        check(
            "zero at identity exactly",
            nonzero_self == 0,
            format!("{nonzero_self} of 200 nonzero"),
        ),
        check(
            "worked value √2·arccosh(2) ≈ 1.8624",
            (worked - 1.8624).abs() < FR_WORKED_TOL,
            format!("{worked:.6}"),
        ),
        check(
            "matches integrated line element dμ²/σ² + 2dσ²/σ²",
            unsolved == 0 && worst < FR_INTEGRATION_TOL,
            format!("max |closed form − integrated| = {worst:.4} over 100 cases ({unsolved} unsolved)"),
        ),
    ]
}

// ---------------------------------------------------------------------------

/// (name, trace, step, P_flat, P_spike, P_osc), evaluated by hand with
/// w = 5, θ = 0.1, τ = 1.
#[allow(clippy::type_complexity)]
const TRUTH_TABLE: &[(&str, &[f64], usize, u8, u8, f64)] = &[
    ("first step", &[0.7, 0.2, 3.0], 0, 0, 0, 0.0),
    ("upward spike", &[0.5, 2.5], 1, 0, 1, 0.0),
    ("downward spike", &[2.5, 0.5], 1, 0, 1, 0.0),
    ("rise of exactly tau", &[0.5, 1.5], 1, 0, 0, 0.0),
    ("fall of exactly tau", &[2.25, 1.25], 1, 0, 0, 0.0),
    ("rise just above tau", &[0.5, 1.5000001], 1, 0, 1, 0.0),
    ("rise just below tau", &[0.5, 1.499], 1, 0, 0, 0.0),
    ("window not yet full", &[1.0, 1.0, 1.0, 1.0, 1.0], 4, 0, 0, 0.0),
    ("constant trace", &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 5, 1, 0, 0.0),
    (
        "alternating at exactly theta",
        &[0.0, 0.1, 0.0, 0.1, 0.0, 0.1],
        5,
        0,
        0,
        1.0,
    ),
    (
        "alternating below theta",
        &[0.0, 0.0625, 0.0, 0.0625, 0.0, 0.0625],
        5,
        1,
        0,
        1.0,
    ),
    ("steady climb", &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5], 5, 0, 0, 0.0),
    ("one reversal", &[0.0, 0.25, 0.5, 0.75, 0.5, 0.25], 5, 0, 0, 0.25),
    ("two reversals", &[1.0, 1.5, 1.0, 0.5, 0.0, 0.5], 5, 0, 0, 0.5),
    ("three reversals", &[1.0, 1.5, 2.0, 1.5, 2.0, 1.5], 5, 0, 0, 0.75),
    (
        "zero change breaks a reversal",
        &[1.0, 1.5, 1.5, 1.0, 1.0, 1.5],
        5,
        0,
        0,
        0.0,
    ),
    (
        "reversals outside the window",
        &[0.0, 1.0, 0.0, 1.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25],
        9,
        0,
        0,
        0.0,
    ),
    (
        "spike closing an oscillation",
        &[1.0, 1.25, 1.0, 1.25, 1.0, 2.5],
        5,
        0,
        1,
        1.0,
    ),
    (
        "mean change just below theta",
        &[2.0, 2.0999, 2.1998, 2.2997, 2.3996, 2.4995],
        5,
        1,
        0,
        0.0,
    ),
    (
        "mean change just above theta",
        &[2.0, 2.125, 2.25, 2.375, 2.5, 2.625],
        5,
        0,
        0,
        0.0,
    ),
    (
        "single jump averaging to theta",
        &[1.0, 1.0, 1.0, 1.0, 1.0, 1.5],
        5,
        0,
        0,
        0.0,
    ),
    (
        "single jump averaging below theta",
        &[1.0, 1.0, 1.0, 1.0, 1.0, 1.49],
        5,
        1,
        0,
        0.0,
    ),
    (
        "flat tail after a spike",
        &[0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
        7,
        1,
        0,
        0.0,
    ),
    (
        "spike seen by the flat window",
        &[0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
        5,
        0,
        0,
        0.0,
    ),
    ("oscillation with spikes", &[0.0, 2.0, 0.0, 2.0, 0.0, 2.0], 5, 0, 1, 1.0),
];

fn entropy_truth_table() -> Vec<Check> {
    let config = PatternConfig::default();
    let mut wrong = Vec::new();
    let mut worst = 0.0f64;
    for &(name, values, t, flat, spike, osc) in TRUTH_TABLE {
        let s = temporal_score(&EntropyTrace::new(values.to_vec()), t, &config);
        if (s.p_flat, s.p_spike, s.p_osc) != (flat, spike, osc) {
            wrong.push(format!("{name}: got ({}, {}, {})", s.p_flat, s.p_spike, s.p_osc));
        }
        let want = 1.0 - (0.2 * flat as f64 + 0.3 * spike as f64 + 0.5 * osc);
        worst = worst.max((s.s_temp - want).abs());
    }
    vec![
        check(
            "25 traces match hand-computed penalties exactly",
            wrong.is_empty() && TRUTH_TABLE.len() == 25,
            if wrong.is_empty() {
                format!("{} traces", TRUTH_TABLE.len())
            } else {
                wrong.join(", ")
            },
        ),
        check(
            "s_temp = 1 − (0.2·P_flat + 0.3·P_spike + 0.5·P_osc)",
            worst <= STEMP_TOL,
            format!("max deviation {worst:.1e}"),
        ),
    ]
}

// ---------------------------------------------------------------------------

fn planted_analyses() -> Vec<TrajectoryAnalysis> {
    let ds = load_dataset(fixtures().join("planted/data")).expect("planted fixture");
    let ensemble = load_ensemble(fixtures().join("planted/ckpt/synthetic")).expect("planted checkpoint");
    let refs: Vec<&Trajectory> = ds.trajectories.iter().collect();
    analyze(&refs, &ensemble, &GeometryConfig::default(), &PatternConfig::default()).expect("analysis")
}

fn is_planted_unfaithful(a: &TrajectoryAnalysis) -> bool {
    a.id.starts_with("unfaithful-")
}

fn planted_separation() -> Vec<Check> {
    let analyses = planted_analyses();
    let features: Vec<[f64; 2]> = analyses.iter().map(|a| [a.geometry.rho, a.geometry.contrast]).collect();
    let assignment = density_cluster(&features, &ClusterConfig::default());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (a, flagged) in analyses.iter().zip(&assignment.suspicious) {
        match (is_planted_unfaithful(a), *flagged) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    let mean = |unfaithful: bool| {
        let v: Vec<f64> = analyses
            .iter()
            .filter(|a| is_planted_unfaithful(a) == unfaithful)
            .map(|a| a.geometry.rho)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (rho_u, rho_f) = (mean(true), mean(false));
    vec![
        check(
            "precision ≥ 0.9",
            precision >= PLANTED_MIN_PRECISION,
            format!("{precision:.3} ({tp} true, {fp} false positives)"),
        ),
        check("recall ≥ 0.9", recall >= PLANTED_MIN_RECALL, format!("{recall:.3}")),
        check(
            "unfaithful mean ρ below faithful",
            rho_u < rho_f,
            format!("{rho_u:.4} vs {rho_f:.4}"),
        ),
    ]
}

// ---------------------------------------------------------------------------

fn detector_samples(analyses: &[TrajectoryAnalysis], state: &BootstrapState) -> Vec<(StepFeatures, bool)> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for a in analyses {
        for (t, label) in a.gold_labels.iter().enumerate() {
            if let Some(l @ (FaithLabel::Faithful | FaithLabel::Unfaithful)) = label {
                seen.insert((a.id.clone(), t));
                out.push((a.steps[t], *l == FaithLabel::Faithful));
            }
        }
    }
    for s in &state.samples {
        let a = analyses.iter().find(|a| a.id == s.traj_id).expect("sample trajectory");
        if seen.insert((s.traj_id.clone(), s.step)) {
            out.push((a.steps[s.step], s.label == FaithLabel::Faithful));
        }
    }
    out
}

/// Three rounds of refine, grow, retrain.
fn three_rounds(analyses: &[TrajectoryAnalysis]) -> Vec<BootstrapState> {
    let features: Vec<[f64; 2]> = analyses.iter().map(|a| [a.geometry.rho, a.geometry.contrast]).collect();
    let assignment = density_cluster(&features, &ClusterConfig::default());
    let pool: Vec<RefineInput<'_>> = analyses
        .iter()
        .zip(&assignment.suspicious)
        .zip(&assignment.labels)
        .filter(|((_, s), _)| **s)
        .map(|((a, _), c)| RefineInput {
            analysis: a,
            cluster: *c,
        })
        .collect();
    let text = fs::read_to_string(fixtures().join("planted/ckpt/detector.json")).expect("detector");
    let mut detector = BaselineDetector::from_json(&text).expect("detector json");
    let mut states = vec![BootstrapState::default()];
    for _ in 0..3 {
        let (next, _) = bootstrap_round(
            states.last().expect("state"),
            &pool,
            &detector,
            &RefineConfig::default(),
        )
        .expect("round");
        detector = train_baseline(&detector_samples(analyses, &next), &DetectorTraining::default()).expect("retrain");
        states.push(next);
    }
    states
}

fn bootstrapping() -> Vec<Check> {
    let analyses = planted_analyses();
    let states = three_rounds(&analyses);
    let nested = states
        .windows(2)
        .all(|w| w[0].samples.len() <= w[1].samples.len() && w[0].samples[..] == w[1].samples[..w[0].samples.len()]);
    let added_ok = states.iter().flat_map(|s| &s.samples).all(|s| s.s_fused > 0.5);
    let sizes: Vec<String> = states.iter().map(|s| s.len().to_string()).collect();
    let again = three_rounds(&analyses);
    vec![
        check(
            "D(r−1) ⊆ D(r) for three rounds",
            nested,
            format!("sizes {}", sizes.join(" → ")),
        ),
        check(
            "every added sample has s_t > 0.5",
            added_ok,
            format!("{} samples", states.last().expect("state").len()),
        ),
        check("rerun reproduces every round", again == states, "bitwise equal states"),
    ]
}

// ---------------------------------------------------------------------------

/// r_out, r_ent and total per golden trajectory, from an independent
/// evaluation of the raw fixture files (fixtures/oracles/golden_rewards.py).
const GOLDEN_ORACLE: &[(&str, f64, f64, f64)] = &[
    ("g0-r0", 1.0, 1.0, 1.8913160022257942),
    ("g0-r1", 1.0, 0.9666666666666667, 1.3033731676125353),
    ("g0-r2", -1.0, 0.9166666666666666, -1.1628146699449406),
    ("g1-r0", 1.0, 1.0, 1.8948576458825719),
    ("g1-r1", 1.0, 0.9666666666666667, 1.7388170659430506),
    ("g1-r2", -1.0, 0.9166666666666666, -0.8525322370869843),
];

fn reward_replay() -> Vec<Check> {
    let golden = fixtures().join("golden");
    let ds = load_dataset(golden.join("data")).expect("golden data");
    let ensemble = load_ensemble(golden.join("ckpt/math")).expect("golden checkpoint");
    let text = fs::read_to_string(golden.join("ckpt/detector.json")).expect("detector");
    let detector = BaselineDetector::from_json(&text).expect("detector json");
    let mut reports: Vec<_> = ds
        .trajectories
        .iter()
        .map(|t| reward_flow(t, &ds.answer_set, Some(&ensemble), &detector, &FlowConfig::default()).expect("flow"))
        .collect();
    let queries: Vec<String> = ds.trajectories.iter().map(|t| t.query.clone()).collect();
    assign_advantages(&mut reports, &queries);

    let mut frozen: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(golden.join("expected/rewards.csv")).expect("frozen rewards");
    for rec in rdr.records() {
        let rec = rec.expect("row");
        frozen.insert(
            rec[0].to_string(),
            (1..7).map(|i| rec[i].parse().expect("number")).collect(),
        );
    }
    let mut bit_mismatch = Vec::new();
    for r in &reports {
        let b = &r.breakdown;
        let got = [
            b.r_out,
            b.r_proc,
            b.r_ent,
            b.r_mani,
            b.total,
            b.advantage.expect("advantage"),
        ];
        let want = frozen.get(&r.traj_id).expect("frozen row");
        if got.iter().zip(want).any(|(g, w)| g.to_bits() != w.to_bits()) {
            bit_mismatch.push(r.traj_id.clone());
        }
    }
    let oracle_ok = GOLDEN_ORACLE.iter().all(|&(id, out, ent, total)| {
        reports.iter().any(|r| {
            r.traj_id == id
                && r.breakdown.r_out == out
                && r.breakdown.r_ent == ent
                && r.breakdown.total.to_bits() == total.to_bits()
        })
    });

    let hand = total_reward(
        &RewardComponents {
            r_out: 1.0,
            r_proc: 1.0,
            r_ent: 1.0,
            r_mani: 2.0,
        },
        &RewardWeights::default(),
    );
    let adv = group_normalize(&[2.0, 0.0, -2.0]).expect("group");
    let adv_ok = (adv[0] - 1.2247).abs() < ADVANTAGE_TOL && adv[1] == 0.0 && (adv[2] + 1.2247).abs() < ADVANTAGE_TOL;
    let loss = grpo_loss_from_advantages(&[1.0, -1.0], &[-1.0, -2.0], &[-1.0, -2.0], 0.0).expect("loss");

    vec![
        check(
            "golden breakdown reproduced bit-exactly",
            bit_mismatch.is_empty() && reports.len() == frozen.len(),
            format!("{} trajectories, mismatched: {:?}", reports.len(), bit_mismatch),
        ),
        check("independent r_out, r_ent and total agree", oracle_ok, "6 trajectories"),
        check(
            "hand case (1, 1, 1, U = −2) totals 2.2",
            (hand.total - 2.2).abs() < 1e-12,
            format!("{}", hand.total),
        ),
        check(
            "normalizing (2, 0, −2) gives (±1.2247, 0)",
            adv_ok,
            format!("({:.6}, {}, {:.6})", adv[0], adv[1], adv[2]),
        ),
        check("GRPO hand case is −0.5 exactly", loss == -0.5, format!("{loss}")),
    ]
}

// ---------------------------------------------------------------------------

fn run_stage(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_geofaith"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEOFAITH_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`{}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let data = fixtures().join("planted/data");
    let data = data.to_str().expect("utf-8 path");
    let stages: Vec<Vec<&str>> = vec![
        vec!["validate", "--input", data, "--out", "validate"],
        vec!["pca", "--input", data, "--out", "pca"],
        vec![
            "train-vae",
            "--input",
            data,
            "--out",
            "ckpt",
            "--input-dim",
            "16",
            "--hidden",
            "32,32",
            "--latent-dim",
            "2",
            "--max-epochs",
            "150",
            "--batch-size",
            "64",
        ],
        vec!["geometry", "--input", data, "--ensemble", "ckpt", "--out", "geometry"],
        vec!["entropy", "--input", data, "--out", "entropy"],
        vec![
            "train-detector",
            "--analysis",
            "geometry/analysis.json",
            "--out",
            "ckpt",
        ],
        vec!["cluster", "--analysis", "geometry/analysis.json", "--out", "cluster"],
        vec![
            "refine",
            "--analysis",
            "geometry/analysis.json",
            "--clusters",
            "cluster/clusters.json",
            "--out",
            "refine",
            "--detector-weights",
            "ckpt/detector.json",
        ],
        vec![
            "bootstrap",
            "--analysis",
            "geometry/analysis.json",
            "--clusters",
            "cluster/clusters.json",
            "--out",
            "round1",
            "--detector-weights",
            "ckpt/detector.json",
        ],
        vec![
            "bootstrap",
            "--analysis",
            "geometry/analysis.json",
            "--clusters",
            "cluster/clusters.json",
            "--state",
            "round1/bootstrap_state.json",
            "--out",
            "round2",
            "--detector-weights",
            "ckpt/detector.json",
        ],
        vec![
            "reward",
            "--input",
            data,
            "--ensemble",
            "ckpt",
            "--detector-weights",
            "ckpt/detector.json",
            "--out",
            "reward",
        ],
    ];
    for args in stages {
        run_stage(dir, &args)?;
    }
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("prefix").to_path_buf();
                out.insert(rel, fs::read(&path).expect("read file"));
            }
        }
    }
    out
}

fn end_to_end() -> Vec<Check> {
    let start = Instant::now();
    let runs: Vec<(tempfile::TempDir, Result<(), String>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().expect("tempdir");
            let result = pipeline(dir.path());
            (dir, result)
        })
        .collect();
    let took = start.elapsed();
    let errors: Vec<String> = runs.iter().filter_map(|(_, r)| r.clone().err()).collect();
    let (a, b) = (tree(runs[0].0.path()), tree(runs[1].0.path()));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    vec![
        check(
            "every stage exits 0",
            errors.is_empty(),
            errors.first().cloned().unwrap_or_else(|| "11 stages, twice".into()),
        ),
        check(
            "two runs are byte-identical",
            errors.is_empty() && differing.is_empty(),
            format!("{} files compared, differing: {:?}", a.len(), differing),
        ),
        check(
            "two runs finish under 10 minutes",
            took < E2E_BUDGET,
            format!("{:.1}s", took.as_secs_f64()),
        ),
    ]
}
