//! Mahalanobis distances against a reference Gaussian law and χ² QQ
//! goodness-of-fit summaries.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::hsgd::GaussianLaw;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("law covariance is singular (smallest eigenvalue {min_eig:.6e}); Mahalanobis distances undefined")]
    SingularCovariance { min_eig: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Eigendecomposed law for repeated squared-Mahalanobis evaluations.
#[derive(Debug)]
pub struct MahalanobisContext {
    mean: DVector<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl MahalanobisContext {
    pub fn new(law: &GaussianLaw) -> Result<Self, DiagnosticsError> {
        let eig = law.cov.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().copied().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= 1e-12 * max.max(1e-300) {
            return Err(DiagnosticsError::SingularCovariance { min_eig: min });
        }
        Ok(Self {
            mean: law.mean.clone(),
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
        })
    }

    /// `(x - m)ᵀ V⁻¹ (x - m)`.
    pub fn squared_distance(&self, x: &DVector<f64>) -> Result<f64, DiagnosticsError> {
        if x.len() != self.mean.len() {
            return Err(DiagnosticsError::DimensionMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        let z = self.eigvecs.tr_mul(&(x - &self.mean));
        Ok((0..z.len()).map(|l| z[l] * z[l] / self.eigvals[l]).sum())
    }
}

/// One QQ point: theoretical quantile vs empirical order statistic.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct QqPoint {
    pub theoretical: f64,
    pub empirical: f64,
}

/// QQ comparison against `χ²_dof` with the least-squares line through the
/// points; a slope near one indicates distributional match.
#[derive(Debug, Clone)]
pub struct QqSummary {
    pub points: Vec<QqPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub dof: usize,
}

/// Build the QQ pairing of sorted squared distances against χ²_dof quantiles
/// at the Hazen plotting positions `(i + ½)/N`.
pub fn qq_against_chi_squared(samples_sq: &[f64], dof: usize) -> QqSummary {
    assert!(!samples_sq.is_empty() && dof >= 1);
    let mut sorted = samples_sq.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let chi = ChiSquared::new(dof as f64).expect("dof >= 1");
    let n = sorted.len();
    let points: Vec<QqPoint> = sorted
        .iter()
        .enumerate()
        .map(|(i, &emp)| QqPoint {
            theoretical: chi.inverse_cdf((i as f64 + 0.5) / n as f64),
            empirical: emp,
        })
        .collect();
    let (slope, intercept) = fit_line(&points);
    QqSummary {
        points,
        slope,
        intercept,
        dof,
    }
}

fn fit_line(points: &[QqPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x: f64 = points.iter().map(|p| p.theoretical).sum::<f64>() / n;
    let mean_y: f64 = points.iter().map(|p| p.empirical).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for p in points {
        let dx = p.theoretical - mean_x;
        sxx += dx * dx;
        sxy += dx * (p.empirical - mean_y);
    }
    let slope = sxy / sxx;
    (slope, mean_y - slope * mean_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn mahalanobis_of_standard_law_is_norm_squared() {
        let law = GaussianLaw {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
        };
        let ctx = MahalanobisContext::new(&law).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_abs_diff_eq!(ctx.squared_distance(&x).unwrap(), x.norm_squared(), epsilon = 1e-12);
    }

    #[test]
    fn singular_law_is_rejected_with_smallest_eigenvalue() {
        let law = GaussianLaw {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        };
        match MahalanobisContext::new(&law) {
            Err(DiagnosticsError::SingularCovariance { min_eig }) => {
                assert!(min_eig.abs() < 1e-12)
            }
            other => panic!("expected SingularCovariance, got {other:?}"),
        }
    }

    #[test]
    fn qq_of_exact_chi_squared_draws_has_unit_slope() {
        // Sample χ²_20 directly as sums of squared normals.
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let dof = 20;
        let samples: Vec<f64> = (0..4000)
            .map(|_| {
                (0..dof)
                    .map(|_| {
                        let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                        z * z
                    })
                    .sum()
            })
            .collect();
        let qq = qq_against_chi_squared(&samples, dof);
        assert!(
            (qq.slope - 1.0).abs() < 0.05,
            "slope {} should be near 1",
            qq.slope
        );
    }
}
