use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Neighborhood radius in standardized feature units.
    pub radius: f64,
    /// Minimum neighborhood size (the point itself included) for a core point.
    pub min_pts: usize,
    /// A cluster is suspicious when its mean standardized ρ lies more than
    /// this far below the median standardized ρ.
    pub suspicion_margin: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            radius: 0.5,
            min_pts: 5,
            suspicion_margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per point; `None` marks noise.
    pub labels: Vec<Option<usize>>,
    pub suspicious_clusters: Vec<bool>,
    /// Per point: noise or member of a suspicious cluster.
    pub suspicious: Vec<bool>,
    /// The standardized (ρ, C) features the clustering ran on.
    pub standardized: Vec<[f64; 2]>,
}

impl ClusterAssignment {
    pub fn cluster_count(&self) -> usize {
        self.suspicious_clusters.len()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Zero-mean, unit-variance columns (population variance). Constant columns
/// are only centered.
pub fn standardize_columns(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = points.len() as f64;
    let mut out = points.to_vec();
    for c in 0..2 {
        let mean = points.iter().map(|p| p[c]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for p in &mut out {
            p[c] -= mean;
            if sd > 0.0 {
                p[c] /= sd;
            }
        }
    }
    out
}

fn neighbors(points: &[[f64; 2]], i: usize, r2: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&j| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            dx * dx + dy * dy <= r2
        })
        .collect()
}

/// Density-reachability clustering. Points are visited in index order and
/// neighborhoods are expanded in index order, so border points shared by two
/// clusters join the one discovered first.
pub fn dbscan(points: &[[f64; 2]], radius: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let r2 = radius * radius;
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(points, i, r2);
        if seeds.len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let more = neighbors(points, j, r2);
            if more.len() >= min_pts {
                queue.extend(more.into_iter().filter(|&m| !visited[m] || labels[m].is_none()));
            }
        }
    }
    labels
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Standardizes (ρ, C) features, clusters them and flags suspicious points.
pub fn density_cluster(features: &[[f64; 2]], config: &ClusterConfig) -> ClusterAssignment {
    if features.is_empty() {
        return ClusterAssignment {
            labels: vec![],
            suspicious_clusters: vec![],
            suspicious: vec![],
            standardized: vec![],
        };
    }
    let standardized = standardize_columns(features);
    let labels = dbscan(&standardized, config.radius, config.min_pts);
    let clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let med = median(&mut standardized.iter().map(|p| p[0]).collect::<Vec<_>>());
    let mut sums = vec![(0.0, 0usize); clusters];
    for (p, l) in standardized.iter().zip(&labels) {
        if let Some(c) = l {
            sums[*c].0 += p[0];
            sums[*c].1 += 1;
        }
    }
    let suspicious_clusters: Vec<bool> = sums
        .iter()
        .map(|(s, n)| (s / *n as f64) < med - config.suspicion_margin)
        .collect();
    let suspicious = labels
        .iter()
        .map(|l| l.map_or(true, |c| suspicious_clusters[c]))
        .collect();
    ClusterAssignment {
        labels,
        suspicious_clusters,
        suspicious,
        standardized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        for center in [(1.0, 1.0), (3.0, 6.0)] {
            for _ in 0..50 {
                pts.push([center.0 + noise.sample(&mut rng), center.1 + noise.sample(&mut rng)]);
            }
        }
        pts
    }

    /// Independent oracle: core points, union-find over core pairs, then
    /// each border point attached to any core neighbor. Returns cluster
    /// membership as sorted index sets plus the noise set.
    fn exhaustive(points: &[[f64; 2]], radius: f64, min_pts: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
        let n = points.len();
        let near = |i: usize, j: usize| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            dx * dx + dy * dy <= radius * radius
        };
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
            .collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && near(i, j) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut noise = vec![];
        for i in 0..n {
            let root = if core[i] {
                Some(find(&mut parent, i))
            } else {
                (0..n).find(|&j| core[j] && near(i, j)).map(|j| find(&mut parent, j))
            };
            match root {
                Some(r) => groups.entry(r).or_default().push(i),
                None => noise.push(i),
            }
        }
        let mut sets: Vec<Vec<usize>> = groups.into_values().collect();
        sets.sort();
        (sets, noise)
    }

    fn as_sets(labels: &[Option<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
        let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut sets = vec![vec![]; k];
        let mut noise = vec![];
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(c) => sets[*c].push(i),
                None => noise.push(i),
            }
        }
        sets.sort();
        (sets, noise)
    }

    #[test]
    fn planted_blobs_form_two_clusters() {
        let pts = blobs(4);
        let a = density_cluster(&pts, &ClusterConfig::default());
        assert_eq!(a.cluster_count(), 2);
        assert_eq!(a.noise_count(), 0);
        let oracle = exhaustive(&a.standardized, 0.5, 5);
        assert_eq!(as_sets(&a.labels), oracle);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let a = density_cluster(&[[2.0, 3.0]; 7], &ClusterConfig::default());
        assert_eq!(a.labels, vec![Some(0); 7]);
    }

    #[test]
    fn lone_point_is_noise() {
        assert_eq!(dbscan(&[[0.0, 0.0]], 0.5, 3), vec![None]);
        let a = density_cluster(&[[1.0, 1.0]], &ClusterConfig::default());
        assert_eq!(a.suspicious, vec![true]);
    }

    #[test]
    fn low_rho_cluster_is_suspicious() {
        let mut pts = Vec::new();
        for i in 0..30 {
            pts.push([2.0 + 0.01 * i as f64, 5.0 + 0.01 * (i % 3) as f64]);
        }
        for i in 0..20 {
            pts.push([1.0 + 0.01 * i as f64, 1.0 + 0.01 * (i % 4) as f64]);
        }
        let a = density_cluster(&pts, &ClusterConfig::default());
        assert_eq!(a.cluster_count(), 2);
        assert!(a.suspicious[..30].iter().all(|s| !s));
        assert!(a.suspicious[30..].iter().all(|s| *s));
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 1..60)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_reachability_on_core_points(pts in cloud(), r in 0.2f64..1.5, m in 1usize..6) {
            let labels = dbscan(&pts, r, m);
            let (oracle_sets, oracle_noise) = exhaustive(&pts, r, m);
            let (_, noise) = as_sets(&labels);
            prop_assert_eq!(noise, oracle_noise);
            // Core points partition identically; border points may attach to
            // any adjacent cluster, so compare clusters restricted to cores.
            let n = pts.len();
            let core: Vec<bool> = (0..n)
                .map(|i| (0..n).filter(|&j| {
                    let dx = pts[i][0] - pts[j][0];
                    let dy = pts[i][1] - pts[j][1];
                    dx * dx + dy * dy <= r * r
                }).count() >= m)
                .collect();
            let restrict = |sets: Vec<Vec<usize>>| {
                let mut out: Vec<Vec<usize>> = sets
                    .into_iter()
                    .map(|s| s.into_iter().filter(|&i| core[i]).collect::<Vec<_>>())
                    .filter(|s| !s.is_empty())
                    .collect();
                out.sort();
                out
            };
            prop_assert_eq!(restrict(as_sets(&labels).0), restrict(oracle_sets));
        }

        #[test]
        fn clustering_is_deterministic(pts in cloud()) {
            let c = ClusterConfig::default();
            prop_assert_eq!(density_cluster(&pts, &c), density_cluster(&pts, &c));
        }

        #[test]
        fn every_point_gets_one_assignment(pts in cloud(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ClusterConfig { radius: rng.random_range(0.1..2.0), ..ClusterConfig::default() };
            let a = density_cluster(&pts, &c);
            prop_assert_eq!(a.labels.len(), pts.len());
            for l in a.labels.iter().flatten() {
                prop_assert!(*l < a.cluster_count());
            }
        }
    }
}
