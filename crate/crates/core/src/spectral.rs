//! Eigendecomposition cache for the regularized curvature matrix `A = Σ + δI`.
//!
//! Every downstream formula (state-transition operators, Volterra kernel
//! traces, Gaussian law covariances) is a spectral function of `A`, so a
//! single symmetric eigendecomposition amortizes all queries. Since `Σ` and
//! `A` share eigenvectors, both spectra are cached side by side.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::Schedule;

/// Which risk Hessian enters a kernel trace: `∇²P = Σ` or `∇²R = Σ + δI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskHessian {
    Population,
    Regularized,
}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("input matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("covariance eigenvalue {0:.6e} is negative beyond tolerance; input is not PSD")]
    NegativeEigenvalue(f64),
    #[error("time order violated: t = {t} must be >= s = {s}")]
    TimeOrder { t: f64, s: f64 },
}

/// Relative asymmetry accepted before rejecting the input.
const SYMMETRY_RTOL: f64 = 1e-10;
/// Eigenvalues with magnitude below this are clamped to zero to avoid
/// spurious negative diffusion terms.
const EIGENVALUE_CLAMP: f64 = 1e-12;
/// A covariance eigenvalue below `-NEGATIVE_RTOL * ||Σ||` signals non-PSD input.
const NEGATIVE_RTOL: f64 = 1e-8;

/// Shared eigendecomposition of `A = Σ + δI` (and of `Σ` itself).
///
/// Immutable after construction; safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    dim: usize,
    delta: f64,
    /// Eigenvalues of `A`, ascending.
    eigvals: DVector<f64>,
    /// Eigenvalues of `Σ` in the same order, so `eigvals[i] = sigma_eigvals[i] + delta`.
    sigma_eigvals: DVector<f64>,
    /// Orthogonal eigenvector matrix `U` (columns).
    eigvecs: DMatrix<f64>,
}

/// Precomputed kernel trace sums for one `(t, s)` pair, shared across the
/// four kernel variants. With `e_i = exp(-2 λ_i (Γ(t) - Γ(s)))`:
/// `ss = Σ σ_i² e_i`, `s = Σ σ_i e_i`, `sl = Σ σ_i λ_i e_i`, `l = Σ λ_i e_i`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KernelTraceSums {
    pub ss: f64,
    pub s: f64,
    pub sl: f64,
    pub l: f64,
}

impl SpectralCache {
    /// Eigendecompose a symmetric PSD covariance and attach the ridge `delta`.
    pub fn build(covariance: &DMatrix<f64>, delta: f64) -> Result<Self, SpectralError> {
        assert!(delta >= 0.0, "regularization delta must be nonnegative");
        let d = covariance.nrows();
        assert!(d >= 1, "dimension must be at least 1");
        assert_eq!(covariance.ncols(), d, "covariance must be square");

        let norm = covariance.norm();
        let asym = (covariance - covariance.transpose()).norm();
        let rel_asym = if norm > 0.0 { asym / norm } else { 0.0 };
        if rel_asym > SYMMETRY_RTOL {
            return Err(SpectralError::NotSymmetric(rel_asym));
        }

        // Symmetrize before factoring so the decomposition is exactly of a
        // symmetric matrix regardless of last-ulp asymmetry.
        let sym = (covariance + covariance.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

        let mut sigma_eigvals = DVector::zeros(d);
        let mut eigvecs = DMatrix::zeros(d, d);
        let spec_norm = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (col, &src) in order.iter().enumerate() {
            let mut v = eig.eigenvalues[src];
            if v < -NEGATIVE_RTOL * spec_norm {
                return Err(SpectralError::NegativeEigenvalue(v));
            }
            if v < EIGENVALUE_CLAMP {
                v = 0.0;
            }
            sigma_eigvals[col] = v;
            eigvecs.set_column(col, &eig.eigenvectors.column(src));
        }
        let eigvals = sigma_eigvals.map(|v| v + delta);

        Ok(Self {
            dim: d,
            delta,
            eigvals,
            sigma_eigvals,
            eigvecs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Eigenvalues of `A = Σ + δI`, ascending.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Eigenvalues of `Σ`, same ordering as [`Self::eigvals`].
    pub fn sigma_eigvals(&self) -> &DVector<f64> {
        &self.sigma_eigvals
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    /// `Uᵀ v`: rotate a vector into the eigenbasis.
    pub fn to_eigenbasis(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigvecs.tr_mul(v)
    }

    /// `U y`: rotate an eigenbasis vector back.
    pub fn from_eigenbasis(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.eigvecs * y
    }

    /// `Uᵀ M U`.
    pub fn mat_to_eigenbasis(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.eigvecs.tr_mul(m) * &self.eigvecs
    }

    /// `U M Uᵀ`.
    pub fn mat_from_eigenbasis(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.eigvecs * m * self.eigvecs.transpose()
    }

    /// Diagonal of `Φ(t, s)` in the eigenbasis: `exp(-λ_i (Γ(t) - Γ(s)))`.
    pub fn transition_eigen(
        &self,
        schedule: &Schedule,
        t: f64,
        s: f64,
    ) -> Result<DVector<f64>, SpectralError> {
        if t < s {
            return Err(SpectralError::TimeOrder { t, s });
        }
        let dgamma = schedule.gamma_integral(t) - schedule.gamma_integral(s);
        Ok(self.eigvals.map(|lam| (-lam * dgamma).exp()))
    }

    /// Dense state-transition matrix `Φ(t, s) = U exp(-Λ (Γ(t)-Γ(s))) Uᵀ`.
    ///
    /// Symmetric PSD with spectral norm at most one.
    pub fn transition(
        &self,
        schedule: &Schedule,
        t: f64,
        s: f64,
    ) -> Result<DMatrix<f64>, SpectralError> {
        if s < 0.0 {
            return Err(SpectralError::TimeOrder { t, s });
        }
        let diag = self.transition_eigen(schedule, t, s)?;
        let mut scaled = self.eigvecs.clone();
        for (col, &w) in diag.iter().enumerate() {
            scaled.column_mut(col).scale_mut(w);
        }
        Ok(scaled * self.eigvecs.transpose())
    }

    pub(crate) fn kernel_trace_sums(&self, dgamma: f64) -> KernelTraceSums {
        let mut ss = 0.0;
        let mut s = 0.0;
        let mut sl = 0.0;
        let mut l = 0.0;
        for i in 0..self.dim {
            let sig = self.sigma_eigvals[i];
            let lam = self.eigvals[i];
            let e = (-2.0 * lam * dgamma).exp();
            ss += sig * sig * e;
            s += sig * e;
            sl += sig * lam * e;
            l += lam * e;
        }
        KernelTraceSums { ss, s, sl, l }
    }

    /// Volterra kernel pair at `(t, s)`:
    /// `G(t,s;M)  = (γ²(s)/d)   tr(Σ M Φ²(t,s))` and
    /// `G'(t,s;M) = (σ²γ²(s)/2d) tr(M Φ²(t,s))`,
    /// with `M = Σ` (population) or `M = Σ + δI` (regularized).
    pub fn kernel_traces(
        &self,
        schedule: &Schedule,
        t: f64,
        s: f64,
        sigma: f64,
        hessian: RiskHessian,
    ) -> Result<(f64, f64), SpectralError> {
        if t < s {
            return Err(SpectralError::TimeOrder { t, s });
        }
        let dgamma = schedule.gamma_integral(t) - schedule.gamma_integral(s);
        let sums = self.kernel_trace_sums(dgamma);
        let gamma_sq = schedule.gamma(s).powi(2);
        let d = self.dim as f64;
        let (tr_g, tr_gp) = match hessian {
            RiskHessian::Population => (sums.ss, sums.s),
            RiskHessian::Regularized => (sums.sl, sums.l),
        };
        let g = gamma_sq / d * tr_g;
        let gp = sigma * sigma * gamma_sq / (2.0 * d) * tr_gp;
        Ok((g, gp))
    }

    /// Rebuild `A` from the cached factors (used by reconstruction checks).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.eigvecs.clone();
        for (col, &lam) in self.eigvals.iter().enumerate() {
            scaled.column_mut(col).scale_mut(lam);
        }
        scaled * self.eigvecs.transpose()
    }
}
