//! Linear and nonlinear dimensionality diagnostics over pooled hidden states:
//! PCA explained-variance curves and the TwoNN intrinsic-dimension estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Above this ambient dimension the spectrum is taken from the N×N Gram
/// matrix instead of the D×D covariance.
pub const GRAM_SWITCH_DIM: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rank {k} exceeds min(N-1, D) = {max}")]
    RankTooLarge { k: usize, max: usize },
    #[error("all nearest-neighbor ratios were degenerate")]
    DegenerateCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    /// Covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `ratios[k-1]` is the cumulative explained variance at rank k.
    pub ratios: Vec<f64>,
}

/// Spectrum of the empirical covariance (unbiased N-1 denominator).
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub mean: DVector<f64>,
    /// Descending eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, matching `eigenvalues`, sign-normalized.
    pub vectors: DMatrix<f64>,
}

fn column_mean(points: &DMatrix<f64>) -> DVector<f64> {
    let n = points.nrows() as f64;
    DVector::from_iterator(points.ncols(), points.column_iter().map(|c| c.sum() / n))
}

fn centered(points: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut x = points.clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    x
}

/// Flips each column so its largest-magnitude entry is positive.
fn normalize_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0usize;
        for i in 0..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn sorted_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Eigen-decomposition of the empirical covariance of `points` (rows are samples).
pub fn covariance_spectrum(points: &DMatrix<f64>) -> Result<Spectrum, SpectralError> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(SpectralError::TooFewSamples { needed: 2, got: n });
    }
    let mean = column_mean(points);
    let x = centered(points, &mean);
    let denom = (n - 1) as f64;
    let (eigenvalues, mut vectors) = if d <= GRAM_SWITCH_DIM {
        let cov = (x.transpose() * &x) / denom;
        sorted_eigen(SymmetricEigen::new(cov))
    } else {
        // Nonzero spectrum of XᵀX equals that of XXᵀ; v = Xᵀu / ‖Xᵀu‖.
        let gram = (&x * x.transpose()) / denom;
        let (values, u) = sorted_eigen(SymmetricEigen::new(gram));
        let mut v = x.transpose() * u;
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        (values, v)
    };
    normalize_signs(&mut vectors);
    Ok(Spectrum {
        mean,
        eigenvalues,
        vectors,
    })
}

/// Cumulative explained variance ratios from a descending spectrum.
pub fn variance_ratios(eigenvalues: &[f64], k_max: usize) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    let k_max = k_max.min(eigenvalues.len());
    eigenvalues[..k_max]
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                1.0
            }
        })
        .collect()
}

pub fn explained_variance(points: &DMatrix<f64>, k_max: usize) -> Result<VarianceCurve, SpectralError> {
    let spectrum = covariance_spectrum(points)?;
    let ratios = variance_ratios(&spectrum.eigenvalues, k_max);
    Ok(VarianceCurve {
        eigenvalues: spectrum.eigenvalues,
        ratios,
    })
}

/// A fitted rank-k PCA chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// D×k, stored column-major as in nalgebra.
    pub components: Vec<f64>,
    pub dim: usize,
    pub rank: usize,
}

impl Pca {
    pub fn components_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.rank, &self.components)
    }

    /// Projects a single D-vector onto the k components.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rank];
        for (c, o) in out.iter_mut().enumerate() {
            let col = &self.components[c * self.dim..(c + 1) * self.dim];
            *o = col
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(w, (xi, m))| w * (xi - m))
                .sum();
        }
        out
    }

    pub fn transform_rows(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mean = DVector::from_column_slice(&self.mean);
        centered(points, &mean) * self.components_matrix()
    }

    /// Maps projected coordinates back to the ambient space.
    pub fn inverse_rows(&self, projected: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = projected * self.components_matrix().transpose();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        x
    }

    /// Rounds every stored value to the nearest f32 so that checkpoints,
    /// which store 32-bit floats, round-trip exactly.
    pub fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.components.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub pca: Pca,
    pub eigenvalues: Vec<f64>,
    pub projected: DMatrix<f64>,
}

pub fn pca_fit(points: &DMatrix<f64>, k: usize) -> Result<(Pca, Vec<f64>), SpectralError> {
    let (n, d) = points.shape();
    let max = n.saturating_sub(1).min(d);
    if k == 0 || k > max {
        return Err(SpectralError::RankTooLarge { k, max });
    }
    let spectrum = covariance_spectrum(points)?;
    let comps = spectrum.vectors.columns(0, k).into_owned();
    Ok((
        Pca {
            mean: spectrum.mean.iter().copied().collect(),
            components: comps.as_slice().to_vec(),
            dim: d,
            rank: k,
        },
        spectrum.eigenvalues,
    ))
}

pub fn pca_fit_transform(points: &DMatrix<f64>, k: usize) -> Result<PcaProjection, SpectralError> {
    let (pca, eigenvalues) = pca_fit(points, k)?;
    let projected = pca.transform_rows(points);
    Ok(PcaProjection {
        pca,
        eigenvalues,
        projected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoNNEstimate {
    pub d_hat: f64,
    pub n_retained: usize,
}

/// Closed-form maximum-likelihood dimension from neighbor ratios. Ratios
/// that are not strictly above 1 (or not finite) are discarded.
pub fn twonn_from_ratios(ratios: &[f64]) -> Result<TwoNNEstimate, SpectralError> {
    let mut n = 0usize;
    let mut log_sum = 0.0;
    for &mu in ratios {
        if mu.is_finite() && mu > 1.0 {
            n += 1;
            log_sum += mu.ln();
        }
    }
    if n == 0 || log_sum <= 0.0 {
        return Err(SpectralError::DegenerateCloud);
    }
    Ok(TwoNNEstimate {
        d_hat: n as f64 / log_sum,
        n_retained: n,
    })
}

/// Second-to-first nearest-neighbor distance ratio for every point, by
/// exhaustive search. Points whose nearest neighbor coincides with them get
/// a NaN ratio so they are dropped downstream.
pub fn neighbor_ratios(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows();
    // Row-major copy for contiguous distance loops.
    let d = points.ncols();
    let rows: Vec<f64> = (0..n)
        .flat_map(|i| points.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &rows[i * d..(i + 1) * d];
            let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = &rows[j * d..(j + 1) * d];
                let sq: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                if sq < r1 {
                    r2 = r1;
                    r1 = sq;
                } else if sq < r2 {
                    r2 = sq;
                }
            }
            if r1 > 0.0 && r2.is_finite() {
                (r2 / r1).sqrt()
            } else {
                f64::NAN
            }
        })
        .collect()
}

pub fn twonn_estimate(points: &DMatrix<f64>) -> Result<TwoNNEstimate, SpectralError> {
    let n = points.nrows();
    if n < 3 {
        return Err(SpectralError::TooFewSamples { needed: 3, got: n });
    }
    twonn_from_ratios(&neighbor_ratios(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_covariance_gives_linear_ratios() {
        let ev = vec![1.0; 10];
        let r = variance_ratios(&ev, 10);
        for (k, v) in r.iter().enumerate() {
            assert_relative_eq!(*v, (k + 1) as f64 / 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rank_one_data_is_fully_explained() {
        let pts = DMatrix::from_fn(20, 5, |i, j| (i as f64 - 3.0) * (j as f64 + 1.0));
        let curve = explained_variance(&pts, 5).unwrap();
        assert_relative_eq!(curve.ratios[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let pts = DMatrix::from_element(1, 3, 1.0);
        assert_eq!(
            explained_variance(&pts, 2).unwrap_err(),
            SpectralError::TooFewSamples { needed: 2, got: 1 }
        );
    }

    #[test]
    fn pca_on_axis_aligned_points() {
        let pts = DMatrix::from_row_slice(4, 2, &[-1.5, 0.0, -0.5, 0.0, 0.5, 0.0, 1.5, 0.0]);
        let p = pca_fit_transform(&pts, 1).unwrap();
        assert_relative_eq!(p.pca.components[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.pca.components[1].abs(), 0.0, epsilon = 1e-12);
        for i in 0..4 {
            assert_relative_eq!(p.projected[(i, 0)], pts[(i, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn full_rank_pca_reconstructs_exactly() {
        let pts = gaussian(40, 6, 1);
        let p = pca_fit_transform(&pts, 6).unwrap();
        let back = p.pca.inverse_rows(&p.projected);
        assert!((back - pts).abs().max() < 1e-8);
    }

    #[test]
    fn reconstruction_error_matches_trailing_spectrum() {
        // Oracle: an independent symmetric eigensolve of the covariance.
        let pts = gaussian(100, 16, 2);
        let p = pca_fit_transform(&pts, 4).unwrap();
        let back = p.pca.inverse_rows(&p.projected);
        let err = (&pts - back).norm_squared() / 99.0;
        let mean = column_mean(&pts);
        let x = centered(&pts, &mean);
        let cov = x.transpose() * &x / 99.0;
        let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let trailing: f64 = ev[4..].iter().sum();
        assert_relative_eq!(err, trailing, epsilon = 1e-6);
    }

    #[test]
    fn components_are_orthonormal_and_signed() {
        let pts = gaussian(50, 8, 3);
        let p = pca_fit_transform(&pts, 5).unwrap();
        let c = p.pca.components_matrix();
        let gram = c.transpose() * &c;
        assert!((gram - DMatrix::identity(5, 5)).abs().max() < 1e-6);
        for col in c.column_iter() {
            let m = col
                .iter()
                .copied()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(m > 0.0);
        }
    }

    #[test]
    fn rank_too_large() {
        let pts = gaussian(5, 8, 4);
        assert_eq!(
            pca_fit_transform(&pts, 5).unwrap_err(),
            SpectralError::RankTooLarge { k: 5, max: 4 }
        );
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let pts = gaussian(30, 1100, 5);
        let s = covariance_spectrum(&pts).unwrap();
        let x = centered(&pts, &s.mean);
        let cov = x.transpose() * &x / 29.0;
        // Check the leading eigenpair against the covariance directly.
        let v = s.vectors.column(0);
        let cv = &cov * v;
        assert!((cv - v * s.eigenvalues[0]).abs().max() < 1e-8 * s.eigenvalues[0]);
    }

    #[test]
    fn ratios_equal_to_e_give_unit_dimension() {
        let r = vec![std::f64::consts::E; 50];
        let est = twonn_from_ratios(&r).unwrap();
        assert_relative_eq!(est.d_hat, 1.0, epsilon = 1e-12);
        assert_eq!(est.n_retained, 50);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let pts = DMatrix::from_element(3, 4, 2.5);
        assert_eq!(twonn_estimate(&pts).unwrap_err(), SpectralError::DegenerateCloud);
    }

    #[test]
    fn ties_are_discarded() {
        // Middle point of three equally spaced collinear points has a tie.
        let pts = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let r = neighbor_ratios(&pts);
        assert_relative_eq!(r[1], 1.0);
        let est = twonn_estimate(&pts).unwrap();
        assert_eq!(est.n_retained, 2);
    }

    fn cloud() -> impl Strategy<Value = DMatrix<f64>> {
        (5usize..40, 2usize..6).prop_flat_map(|(n, d)| {
            prop::collection::vec(-10.0f64..10.0, n * d).prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
        })
    }

    /// A random orthogonal matrix from the QR factorization of a Gaussian one.
    fn rotation(d: usize, seed: u64) -> DMatrix<f64> {
        gaussian(d, d, seed).qr().q()
    }

    proptest! {
        #[test]
        fn variance_ratios_never_decrease(points in cloud()) {
            let curve = explained_variance(&points, points.ncols()).unwrap();
            prop_assert!(curve.ratios.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn twonn_is_rotation_invariant(points in cloud(), seed in any::<u64>()) {
            let q = rotation(points.ncols(), seed);
            let a = twonn_estimate(&points).unwrap().d_hat;
            let b = twonn_estimate(&(&points * q)).unwrap().d_hat;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn twonn_is_scale_invariant(points in cloud(), c in 0.01f64..100.0) {
            let a = twonn_estimate(&points).unwrap().d_hat;
            let b = twonn_estimate(&(&points * c)).unwrap().d_hat;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn constant_padding_leaves_twonn_unchanged(points in cloud(), pad in prop::collection::vec(-5.0f64..5.0, 1..4)) {
            let (n, d) = points.shape();
            let padded = DMatrix::from_fn(n, d + pad.len(), |i, j| if j < d { points[(i, j)] } else { pad[j - d] });
            let a = twonn_estimate(&points).unwrap().d_hat;
            let b = twonn_estimate(&padded).unwrap().d_hat;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
