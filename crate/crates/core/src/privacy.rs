//! Neighboring-process coupling, closed-form Gaussian Rényi divergence, the
//! uniform-time mixture bound, and the three release strategies.
//!
//! Two trajectories run on datasets differing in one record. They share the
//! Gaussian law `N(m(s), V(s))` until the differing record is used at time
//! `s`, where each applies its own affine map
//! `X_{s+} = C_i X_{s-} + c_i + e`,
//! `C_i = I - (γ(s)/d)(a_i a_iᵀ + δI)`, `c_i = (γ(s)/d) b_i a_i`,
//! `e ~ N(0, γ²(s)σ²/d² I)`,
//! and both evolve under the common linear dynamics afterwards. The released
//! object (last iterate, a block of iterates, or their average) is Gaussian
//! under each process, so the per-`s` privacy loss is the closed-form Rényi
//! divergence; a uniform differentiating time turns the per-`s` values into
//! the mixture bound
//! `ε ≤ (1/(α-1)) ln[(T-t)/T + (1/T)∫₀ᵗ exp((α-1) sup_θ D(s)) ds]`.
//!
//! Last-iterate divergences exploit the structure of the update: in the
//! eigenbasis both covariances are one shared diagonal plus a rank-2
//! correction, so each `(s, t)` evaluation costs `O(d)` instead of `O(d³)`.
//! Multi-iterate block laws are assembled densely and are restricted to
//! moderate `d` by [`RdpOptions::dense_dim_limit`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::hsgd::{GaussianLaw, LawTable};
use crate::problem::{ProblemInstance, Schedule};
use crate::spectral::SpectralCache;
use crate::volterra::RiskCurves;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time order violated: t = {t} must be >= s = {s}")]
    TimeOrder { t: f64, s: f64 },
    #[error("release time {t} exceeds the horizon {horizon}")]
    HorizonExceeded { t: f64, horizon: f64 },
    #[error("alpha-mixture covariance not positive definite at s = {s:?} (min eigenvalue ratio {min_eig:.3e}); divergence undefined at this order")]
    MixtureNotPd { s: Option<f64>, min_eig: f64 },
    #[error("covariance not positive definite (min eigenvalue {min_eig:.3e})")]
    CovarianceNotPd { min_eig: f64 },
    #[error("invalid release spec: {0}")]
    InvalidRelease(String),
    #[error(transparent)]
    Law(#[from] crate::hsgd::HsgdError),
}

/// The two records in which the neighboring datasets differ.
#[derive(Debug, Clone)]
pub struct NeighborPair {
    pub a: DVector<f64>,
    pub b: f64,
    pub a_prime: DVector<f64>,
    pub b_prime: f64,
}

impl NeighborPair {
    pub fn from_records(instance: &ProblemInstance, first: usize, second: usize) -> Self {
        Self {
            a: instance.design.row(first).transpose(),
            b: instance.labels[first],
            a_prime: instance.design.row(second).transpose(),
            b_prime: instance.labels[second],
        }
    }
}

/// The affine maps applied by the two processes at the differentiating time.
#[derive(Debug, Clone)]
pub struct DifferentiatingUpdate {
    pub s: f64,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub shift1: DVector<f64>,
    pub shift2: DVector<f64>,
    /// Variance of the injected update noise: `γ²(s)σ²/d²`.
    pub noise_var: f64,
}

impl DifferentiatingUpdate {
    pub fn new(
        instance: &ProblemInstance,
        schedule: &Schedule,
        pair: &NeighborPair,
        sigma: f64,
        s: f64,
    ) -> Result<Self, PrivacyError> {
        let d = instance.dim;
        if pair.a.len() != d || pair.a_prime.len() != d {
            return Err(PrivacyError::DimensionMismatch {
                expected: d,
                got: pair.a.len().max(pair.a_prime.len()),
            });
        }
        let eta = schedule.gamma(s) / d as f64;
        let build = |a: &DVector<f64>| -> DMatrix<f64> {
            let mut c = DMatrix::identity(d, d) * (1.0 - eta * instance.delta);
            c.ger(-eta, a, a, 1.0);
            c
        };
        Ok(Self {
            s,
            c1: build(&pair.a),
            c2: build(&pair.a_prime),
            shift1: &pair.a * (eta * pair.b),
            shift2: &pair.a_prime * (eta * pair.b_prime),
            noise_var: (eta * sigma).powi(2),
        })
    }
}

/// Which iterates are published.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseKind {
    LastIterate,
    Iterates,
    Average,
}

/// Release strategy plus its ordered release times.
#[derive(Debug, Clone)]
pub struct ReleaseSpec {
    pub kind: ReleaseKind,
    pub times: Vec<f64>,
}

impl ReleaseSpec {
    pub fn new(kind: ReleaseKind, times: Vec<f64>) -> Result<Self, PrivacyError> {
        if times.is_empty() {
            return Err(PrivacyError::InvalidRelease("times must be nonempty".into()));
        }
        if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(PrivacyError::InvalidRelease(
                "release times must be positive and finite".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PrivacyError::InvalidRelease(
                "release times must be strictly increasing".into(),
            ));
        }
        if kind == ReleaseKind::LastIterate && times.len() != 1 {
            return Err(PrivacyError::InvalidRelease(
                "last-iterate release takes exactly one time".into(),
            ));
        }
        Ok(Self { kind, times })
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Knobs for the release computation.
#[derive(Debug, Clone, Copy)]
pub struct RdpOptions {
    /// Dense `Jd × Jd` block operations are refused above this dimension
    /// when more than one iterate is released.
    pub dense_dim_limit: usize,
}

impl Default for RdpOptions {
    fn default() -> Self {
        Self {
            dense_dim_limit: 128,
        }
    }
}

/// Post-update laws `N(m_i(s+), V_i(s+))` for the two processes.
///
/// `law_at_s` must be the shared pre-update law at `s`.
pub fn couple_at(
    instance: &ProblemInstance,
    schedule: &Schedule,
    law_at_s: &GaussianLaw,
    pair: &NeighborPair,
    sigma: f64,
    s: f64,
) -> Result<(GaussianLaw, GaussianLaw), PrivacyError> {
    let d = instance.dim;
    if law_at_s.dim() != d {
        return Err(PrivacyError::DimensionMismatch {
            expected: d,
            got: law_at_s.dim(),
        });
    }
    let update = DifferentiatingUpdate::new(instance, schedule, pair, sigma, s)?;
    let apply = |c: &DMatrix<f64>, shift: &DVector<f64>| -> GaussianLaw {
        let mean = c * &law_at_s.mean + shift;
        let mut cov = c * &law_at_s.cov * c.transpose();
        for i in 0..d {
            cov[(i, i)] += update.noise_var;
        }
        GaussianLaw { mean, cov }
    };
    Ok((
        apply(&update.c1, &update.shift1),
        apply(&update.c2, &update.shift2),
    ))
}

/// Evolve a post-update law from `s` to `t` under the common linear dynamics:
/// `mean = Φ(t,s) m + ∫ₛᵗ Φ(t,u)γ(u)Σx̃ du`,
/// `cov  = Φ(t,s) V Φᵀ(t,s) + ∫ₛᵗ Φ(t,u)γ²(u)Q(u)Φᵀ(t,u) du`.
#[allow(clippy::too_many_arguments)]
pub fn propagate(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    curves: &RiskCurves,
    post_law: &GaussianLaw,
    s: f64,
    t: f64,
    sigma: f64,
) -> Result<GaussianLaw, PrivacyError> {
    if t < s {
        return Err(PrivacyError::TimeOrder { t, s });
    }
    if t > curves.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(PrivacyError::HorizonExceeded {
            t,
            horizon: curves.horizon(),
        });
    }
    let d = instance.dim;
    if post_law.dim() != d {
        return Err(PrivacyError::DimensionMismatch {
            expected: d,
            got: post_law.dim(),
        });
    }

    let dgamma = schedule.gamma_integral(t) - schedule.gamma_integral(s);
    let phi: DVector<f64> = cache.eigvals().map(|lam| (-lam * dgamma).exp());
    let y_truth = cache.to_eigenbasis(&instance.ground_truth);
    let drift = DVector::from_fn(d, |l, _| {
        let x = cache.eigvals()[l] * dgamma;
        cache.sigma_eigvals()[l] * y_truth[l] * dgamma * crate::util::one_minus_exp_over(x)
    });

    let mean_eb = {
        let m = cache.to_eigenbasis(&post_law.mean);
        DVector::from_fn(d, |l, _| phi[l] * m[l] + drift[l])
    };
    let mut cov_eb = cache.mat_to_eigenbasis(&post_law.cov);
    for r in 0..d {
        for c in 0..d {
            cov_eb[(r, c)] *= phi[r] * phi[c];
        }
    }
    let shared = shared_cov_eigen(cache, schedule, curves, s, t, sigma);
    for l in 0..d {
        cov_eb[(l, l)] += shared[l];
    }

    Ok(GaussianLaw {
        mean: cache.from_eigenbasis(&mean_eb),
        cov: cache.mat_from_eigenbasis(&cov_eb),
    })
}

/// Trapezoid of `e^{-2λ(Γ(t)-Γ(u))} γ²(u) (2P_uσ_l + σ²)/d` over the grid
/// nodes spanning `[s, t]`, per eigendirection.
fn shared_cov_eigen(
    cache: &SpectralCache,
    schedule: &Schedule,
    curves: &RiskCurves,
    s: f64,
    t: f64,
    sigma: f64,
) -> DVector<f64> {
    let d = cache.dim();
    let mut nodes = vec![s];
    for &u in curves.grid() {
        if u > s + 1e-15 && u < t - 1e-15 {
            nodes.push(u);
        }
    }
    if t > s {
        nodes.push(t);
    }
    let df = d as f64;
    let big_gamma_t = schedule.gamma_integral(t);
    let mut out = DVector::zeros(d);
    for l in 0..d {
        let lam = cache.eigvals()[l];
        let sig = cache.sigma_eigvals()[l];
        let f = |u: f64| -> f64 {
            let decay = (-2.0 * lam * (big_gamma_t - schedule.gamma_integral(u))).exp();
            decay * schedule.gamma(u).powi(2) * (2.0 * curves.p_interp(u) * sig + sigma * sigma) / df
        };
        let mut acc = 0.0;
        for w in nodes.windows(2) {
            acc += 0.5 * (w[1] - w[0]) * (f(w[0]) + f(w[1]));
        }
        out[l] = acc;
    }
    out
}

/// Outcome of a Rényi divergence evaluation; `regularized` records whether a
/// `1e-12·tr/d` ridge had to be added to a covariance before factoring.
#[derive(Debug, Clone, Copy)]
pub struct RenyiResult {
    pub value: f64,
    pub regularized: bool,
}

/// Closed-form order-α Rényi divergence between two Gaussians:
/// `(α/2)ΔᵀM_α⁻¹Δ + (1/(2(α-1)))[α ln det V₁ + (1-α) ln det V₂ - ln det M_α]`
/// with `M_α = αV₁ + (1-α)V₂`.
pub fn renyi_gaussian(law1: &GaussianLaw, law2: &GaussianLaw, alpha: f64) -> Result<f64, PrivacyError> {
    renyi_gaussian_detailed(law1, law2, alpha).map(|r| r.value)
}

pub fn renyi_gaussian_detailed(
    law1: &GaussianLaw,
    law2: &GaussianLaw,
    alpha: f64,
) -> Result<RenyiResult, PrivacyError> {
    assert!(alpha > 1.0, "Rényi order must exceed 1");
    let d = law1.dim();
    if law2.dim() != d {
        return Err(PrivacyError::DimensionMismatch {
            expected: d,
            got: law2.dim(),
        });
    }

    let (v1, ld1, reg1) = ensure_pd(&law1.cov)?;
    let (v2, ld2, reg2) = ensure_pd(&law2.cov)?;

    let mut m_alpha = &v1 * alpha + &v2 * (1.0 - alpha);
    symmetrize(&mut m_alpha);
    let chol = match m_alpha.clone().cholesky() {
        Some(c) => c,
        None => {
            let min_eig = m_alpha.symmetric_eigen().eigenvalues.min();
            return Err(PrivacyError::MixtureNotPd { s: None, min_eig });
        }
    };
    let ld_m = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    let delta = &law1.mean - &law2.mean;
    let maha = delta.dot(&chol.solve(&delta));
    let value = 0.5 * alpha * maha
        + (alpha * ld1 + (1.0 - alpha) * ld2 - ld_m) / (2.0 * (alpha - 1.0));
    Ok(RenyiResult {
        value,
        regularized: reg1 || reg2,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

/// Cholesky a PSD covariance, adding the documented `1e-12·tr/d` ridge once
/// if the plain factorization fails. Returns the (possibly ridged) matrix,
/// its log-determinant, and whether the ridge was needed.
fn ensure_pd(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, bool), PrivacyError> {
    let mut m = cov.clone();
    symmetrize(&mut m);
    if let Some(chol) = m.clone().cholesky() {
        let ld = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        return Ok((m, ld, false));
    }
    let ridge = 1e-12 * m.trace() / m.nrows() as f64;
    let mut ridged = m.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += ridge;
    }
    if let Some(chol) = ridged.clone().cholesky() {
        let ld = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        return Ok((ridged, ld, true));
    }
    let min_eig = m.symmetric_eigen().eigenvalues.min();
    Err(PrivacyError::CovarianceNotPd { min_eig })
}

/// Pair features rotated into the eigenbasis once per pair.
#[derive(Debug, Clone)]
struct PairEigen {
    a1: DVector<f64>,
    a2: DVector<f64>,
    b1: f64,
    b2: f64,
}

impl PairEigen {
    fn new(cache: &SpectralCache, pair: &NeighborPair) -> Self {
        Self {
            a1: cache.to_eigenbasis(&pair.a),
            a2: cache.to_eigenbasis(&pair.a_prime),
            b1: pair.b,
            b2: pair.b_prime,
        }
    }
}

/// Last-iterate divergence in `O(d)`: both covariances share one diagonal
/// `D = Φ²(c₀²v(s) + γ²σ²/d²) + shared(s,t)` and differ by a propagated
/// rank-2 update `B_i W_i B_iᵀ`, so every determinant and solve reduces to a
/// 2×2/4×4 correction via the matrix determinant lemma and Woodbury.
fn last_iterate_divergence_fast(
    table: &LawTable,
    pair: &PairEigen,
    alpha: f64,
    js: usize,
    jt: usize,
) -> Result<f64, PrivacyError> {
    assert!(js <= jt, "differentiating index must not exceed release index");
    let d = table.dim();
    let df = d as f64;
    let gamma_s = table.gamma_at(js);
    let kappa = gamma_s / df;
    let c0 = 1.0 - kappa * table.delta();
    let nv = (kappa * table.sigma()).powi(2);

    let m = table.mean_col(js);
    let v = table.var_col(js);
    let phi = table.phi_eigen(js, jt);
    let shared = table.shared_var_eigen(js, jt);

    let dot1 = pair.a1.dot(&m);
    let dot2 = pair.a2.dot(&m);
    let w1 = DVector::from_fn(d, |l, _| v[l] * pair.a1[l]);
    let w2 = DVector::from_fn(d, |l, _| v[l] * pair.a2[l]);
    let q1 = pair.a1.dot(&w1);
    let q2 = pair.a2.dot(&w2);

    // Shared diagonal and the propagated low-rank factors.
    let mut diag = DVector::zeros(d);
    let mut min_diag = f64::INFINITY;
    for l in 0..d {
        let val = phi[l] * phi[l] * (c0 * c0 * v[l] + nv) + shared[l];
        min_diag = min_diag.min(val);
        diag[l] = val;
    }
    if min_diag <= 0.0 {
        return Err(PrivacyError::CovarianceNotPd { min_eig: min_diag });
    }

    // Columns of U = [φa₁, φw₁, φa₂, φw₂].
    let cols: [DVector<f64>; 4] = [
        DVector::from_fn(d, |l, _| phi[l] * pair.a1[l]),
        DVector::from_fn(d, |l, _| phi[l] * w1[l]),
        DVector::from_fn(d, |l, _| phi[l] * pair.a2[l]),
        DVector::from_fn(d, |l, _| phi[l] * w2[l]),
    ];
    let w_small = |q: f64| -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[kappa * kappa * q, -c0 * kappa, -c0 * kappa, 0.0])
    };
    let w1_small = w_small(q1);
    let w2_small = w_small(q2);

    // K = Uᵀ D⁻¹ U restricted to each factor pair, and the full 4×4.
    let mut k_full = DMatrix::zeros(4, 4);
    for r in 0..4 {
        for c in r..4 {
            let mut acc = 0.0;
            for l in 0..d {
                acc += cols[r][l] * cols[c][l] / diag[l];
            }
            k_full[(r, c)] = acc;
            k_full[(c, r)] = acc;
        }
    }

    let logdet_correction = |k: &DMatrix<f64>, w: &DMatrix<f64>| -> Option<f64> {
        // Nonzero eigenvalues of D^{-1/2} U W Uᵀ D^{-1/2} equal those of
        // K^{1/2} W K^{1/2}; the law is PD iff all 1 + μ are positive.
        let eig = k.clone().symmetric_eigen();
        let mut g = eig.eigenvectors.clone();
        for (col, &lam) in eig.eigenvalues.iter().enumerate() {
            g.column_mut(col).scale_mut(lam.max(0.0).sqrt());
        }
        let s = g.transpose() * w * &g;
        let mut sym = s.clone();
        symmetrize(&mut sym);
        let mu = sym.symmetric_eigen().eigenvalues;
        let mut acc = 0.0;
        for &m in mu.iter() {
            if 1.0 + m <= 0.0 {
                return None;
            }
            acc += m.ln_1p();
        }
        Some(acc)
    };

    let k11 = k_full.view((0, 0), (2, 2)).clone_owned();
    let k22 = k_full.view((2, 2), (2, 2)).clone_owned();
    let ld1 = logdet_correction(&k11, &w1_small)
        .ok_or(PrivacyError::CovarianceNotPd { min_eig: 0.0 })?;
    let ld2 = logdet_correction(&k22, &w2_small)
        .ok_or(PrivacyError::CovarianceNotPd { min_eig: 0.0 })?;

    let mut w_mix = DMatrix::zeros(4, 4);
    w_mix.view_mut((0, 0), (2, 2)).copy_from(&(&w1_small * alpha));
    w_mix
        .view_mut((2, 2), (2, 2))
        .copy_from(&(&w2_small * (1.0 - alpha)));
    let ld_mix = match logdet_correction(&k_full, &w_mix) {
        Some(v) => v,
        None => {
            let eig = {
                let g = {
                    let e = k_full.clone().symmetric_eigen();
                    let mut g = e.eigenvectors.clone();
                    for (col, &lam) in e.eigenvalues.iter().enumerate() {
                        g.column_mut(col).scale_mut(lam.max(0.0).sqrt());
                    }
                    g
                };
                let mut s = g.transpose() * &w_mix * &g;
                symmetrize(&mut s);
                s.symmetric_eigen().eigenvalues.min()
            };
            return Err(PrivacyError::MixtureNotPd {
                s: None,
                min_eig: 1.0 + eig,
            });
        }
    };

    // Mean gap Δ(t;s) = Φ(t,s) κ [(b₁ - a₁ᵀm) a₁ - (b₂ - a₂ᵀm) a₂].
    let coeff1 = kappa * (pair.b1 - dot1);
    let coeff2 = kappa * (pair.b2 - dot2);
    let delta = DVector::from_fn(d, |l, _| {
        phi[l] * (coeff1 * pair.a1[l] - coeff2 * pair.a2[l])
    });

    // ΔᵀM⁻¹Δ by Woodbury against the shared diagonal.
    let z = DVector::from_fn(d, |l, _| delta[l] / diag[l]);
    let u_t_z = DVector::from_fn(4, |r, _| cols[r].dot(&z));
    let cap = DMatrix::identity(4, 4) + &w_mix * &k_full;
    let rhs = &w_mix * &u_t_z;
    let sol = cap
        .lu()
        .solve(&rhs)
        .ok_or(PrivacyError::MixtureNotPd { s: None, min_eig: 0.0 })?;
    let maha = delta.dot(&z) - u_t_z.dot(&sol);

    // The Σ ln D terms cancel exactly between α·lnV₁ + (1-α)·lnV₂ - lnM.
    Ok(0.5 * alpha * maha + (alpha * ld1 + (1.0 - alpha) * ld2 - ld_mix) / (2.0 * (alpha - 1.0)))
}

/// Post-update means and covariances in the eigenbasis (dense path).
struct EigenPost {
    mean: [DVector<f64>; 2],
    cov: [DMatrix<f64>; 2],
}

fn post_update_eigen(table: &LawTable, pair: &PairEigen, js: usize) -> EigenPost {
    let d = table.dim();
    let df = d as f64;
    let gamma_s = table.gamma_at(js);
    let kappa = gamma_s / df;
    let c0 = 1.0 - kappa * table.delta();
    let nv = (kappa * table.sigma()).powi(2);
    let m = table.mean_col(js).clone_owned();
    let v = table.var_col(js).clone_owned();

    let branch = |a: &DVector<f64>, b: f64| -> (DVector<f64>, DMatrix<f64>) {
        let dot = a.dot(&m);
        let w = DVector::from_fn(d, |l, _| v[l] * a[l]);
        let q = a.dot(&w);
        let mean = DVector::from_fn(d, |l, _| c0 * m[l] - kappa * dot * a[l] + kappa * b * a[l]);
        let mut cov = DMatrix::from_diagonal(&v.map(|x| x * c0 * c0));
        // -c₀κ(awᵀ + waᵀ) + κ²q aaᵀ + nv I
        cov.ger(-c0 * kappa, a, &w, 1.0);
        cov.ger(-c0 * kappa, &w, a, 1.0);
        cov.ger(kappa * kappa * q, a, a, 1.0);
        for l in 0..d {
            cov[(l, l)] += nv;
        }
        (mean, cov)
    };
    let (m1, c1) = branch(&pair.a1, pair.b1);
    let (m2, c2) = branch(&pair.a2, pair.b2);
    EigenPost {
        mean: [m1, m2],
        cov: [c1, c2],
    }
}

/// Propagate an eigenbasis post-update covariance from node `js` to `jt`.
fn propagate_cov_eigen(table: &LawTable, cov: &DMatrix<f64>, js: usize, jt: usize) -> DMatrix<f64> {
    let d = table.dim();
    let phi = table.phi_eigen(js, jt);
    let shared = table.shared_var_eigen(js, jt);
    let mut out = cov.clone();
    for r in 0..d {
        for c in 0..d {
            out[(r, c)] *= phi[r] * phi[c];
        }
    }
    for l in 0..d {
        out[(l, l)] += shared[l];
    }
    out
}

fn propagate_mean_eigen(table: &LawTable, mean: &DVector<f64>, js: usize, jt: usize) -> DVector<f64> {
    let phi = table.phi_eigen(js, jt);
    let drift = table.drift_eigen(js, jt);
    DVector::from_fn(table.dim(), |l, _| phi[l] * mean[l] + drift[l])
}

/// Divergence of the suffix block law for a multi-iterate release.
///
/// With `s ∈ (t_{ℓ-1}, t_ℓ]` the released blocks before `t_ℓ` coincide
/// across the two processes, so the divergence is evaluated on the suffix
/// `(t_ℓ, …, t_J)`; blocks follow `[V]_{rj} = Φ(t_r, t_j) V(t_j; s)` for
/// `r ≥ j`.
fn iterates_divergence_dense(
    table: &LawTable,
    pair: &PairEigen,
    alpha: f64,
    js: usize,
    jts: &[usize],
) -> Result<f64, PrivacyError> {
    let suffix: Vec<usize> = jts.iter().copied().filter(|&jt| jt >= js).collect();
    if suffix.is_empty() {
        return Ok(0.0);
    }
    let d = table.dim();
    let jn = suffix.len();
    let post = post_update_eigen(table, pair, js);

    let mut laws = Vec::with_capacity(2);
    for i in 0..2 {
        let covs: Vec<DMatrix<f64>> = suffix
            .iter()
            .map(|&jt| propagate_cov_eigen(table, &post.cov[i], js, jt))
            .collect();
        let mut stacked_cov = DMatrix::zeros(jn * d, jn * d);
        for (jj, &jt_j) in suffix.iter().enumerate() {
            for (rr, &jt_r) in suffix.iter().enumerate().skip(jj) {
                let phi = table.phi_eigen(jt_j, jt_r);
                let mut block = covs[jj].clone();
                for row in 0..d {
                    let w = phi[row];
                    for col in 0..d {
                        block[(row, col)] *= w;
                    }
                }
                stacked_cov
                    .view_mut((rr * d, jj * d), (d, d))
                    .copy_from(&block);
                if rr != jj {
                    stacked_cov
                        .view_mut((jj * d, rr * d), (d, d))
                        .copy_from(&block.transpose());
                }
            }
        }
        let mut stacked_mean = DVector::zeros(jn * d);
        for (jj, &jt) in suffix.iter().enumerate() {
            let m = propagate_mean_eigen(table, &post.mean[i], js, jt);
            stacked_mean.rows_mut(jj * d, d).copy_from(&m);
        }
        laws.push(GaussianLaw {
            mean: stacked_mean,
            cov: stacked_cov,
        });
    }
    renyi_gaussian(&laws[0], &laws[1], alpha)
}

/// Divergence of the averaged release `X̄ = (1/J)Σ X_{t_j}`:
/// mean is the block average and covariance the `J⁻²`-weighted sum of all
/// cross-blocks; blocks at times before `s` carry the shared pre-update law.
fn average_divergence_dense(
    table: &LawTable,
    pair: &PairEigen,
    alpha: f64,
    js: usize,
    jts: &[usize],
) -> Result<f64, PrivacyError> {
    let d = table.dim();
    let jn = jts.len();
    let post = post_update_eigen(table, pair, js);

    let mut laws = Vec::with_capacity(2);
    for i in 0..2 {
        // Per-time covariance V_i(t_j; s) and mean m_i(t_j; s); the shared
        // law applies at times released before the differentiating update.
        let covs: Vec<DMatrix<f64>> = jts
            .iter()
            .map(|&jt| {
                if jt >= js {
                    propagate_cov_eigen(table, &post.cov[i], js, jt)
                } else {
                    DMatrix::from_diagonal(&table.var_col(jt).clone_owned())
                }
            })
            .collect();
        let means: Vec<DVector<f64>> = jts
            .iter()
            .map(|&jt| {
                if jt >= js {
                    propagate_mean_eigen(table, &post.mean[i], js, jt)
                } else {
                    table.mean_col(jt).clone_owned()
                }
            })
            .collect();

        let mut avg_cov = DMatrix::zeros(d, d);
        for (jj, &jt_j) in jts.iter().enumerate() {
            for (rr, &jt_r) in jts.iter().enumerate().skip(jj) {
                let phi = table.phi_eigen(jt_j, jt_r);
                let mut block = covs[jj].clone();
                for row in 0..d {
                    let w = phi[row];
                    for col in 0..d {
                        block[(row, col)] *= w;
                    }
                }
                if rr == jj {
                    avg_cov += &block;
                } else {
                    avg_cov += &block;
                    avg_cov += block.transpose();
                }
            }
        }
        avg_cov /= (jn * jn) as f64;
        let mut avg_mean = DVector::zeros(d);
        for m in &means {
            avg_mean += m;
        }
        avg_mean /= jn as f64;
        laws.push(GaussianLaw {
            mean: avg_mean,
            cov: avg_cov,
        });
    }
    renyi_gaussian(&laws[0], &laws[1], alpha)
}

/// Per-`s` divergence of the released object under one neighboring pair.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SDivergence {
    pub s: f64,
    pub divergence: f64,
    /// Index into the candidate pair list achieving the per-`s` supremum.
    pub argmax_pair: usize,
}

/// Worst-case release report: per-`s` supremum divergences over the candidate
/// pairs and the mixed Rényi-DP upper bound.
#[derive(Debug, Clone)]
pub struct RdpReport {
    pub per_s: Vec<SDivergence>,
    pub epsilon: f64,
    pub worst_s: f64,
    pub argmax_pair: usize,
    pub t_last: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// The discrete shuffled-index grid `s = ℓ/d`, `ℓ = 1…n`.
pub fn shuffled_index_grid(instance: &ProblemInstance) -> Vec<f64> {
    let d = instance.dim as f64;
    (1..=instance.n_samples).map(|l| l as f64 / d).collect()
}

/// Worst-case Rényi-DP loss of a release over a candidate pair set.
///
/// For every `s` in `s_grid` the released-object divergence is maximized over
/// `pairs`; the mixed bound integrates `exp((α-1)D(s))` with uniform weights
/// over the grid points in `(0, t_last]` scaled by `t_last/T`, plus the
/// `(T-t_last)/T` mass on which the release is independent of the differing
/// record. Computed with a log-sum-exp reduction.
///
/// `x0` and `sigma` must match the inputs the risk curve was solved with.
#[allow(clippy::too_many_arguments)]
pub fn rdp_release(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    curves: &RiskCurves,
    x0: &DVector<f64>,
    pairs: &[NeighborPair],
    sigma: f64,
    alpha: f64,
    release: &ReleaseSpec,
    s_grid: &[f64],
    opts: &RdpOptions,
) -> Result<RdpReport, PrivacyError> {
    let table = LawTable::build(instance, cache, schedule, curves, x0, sigma)?;
    rdp_release_with_table(
        &table,
        cache,
        pairs,
        alpha,
        release,
        s_grid,
        instance.horizon(),
        opts,
    )
}

/// Worst-case Rényi-DP loss given an already-built law table (the table
/// carries `x0` and `σ`; `σ` must match the curve the table was built from).
#[allow(clippy::too_many_arguments)]
pub fn rdp_release_with_table(
    table: &LawTable,
    cache: &SpectralCache,
    pairs: &[NeighborPair],
    alpha: f64,
    release: &ReleaseSpec,
    s_grid: &[f64],
    t_mech: f64,
    opts: &RdpOptions,
) -> Result<RdpReport, PrivacyError> {
    assert!(alpha > 1.0, "Rényi order must exceed 1");
    assert!(!pairs.is_empty(), "need at least one candidate pair");
    let d = table.dim();
    let t_last = release.last_time();
    if t_last > table.horizon() * (1.0 + 1e-9) + 1e-12 {
        return Err(PrivacyError::HorizonExceeded {
            t: t_last,
            horizon: table.horizon(),
        });
    }
    if release.times.len() > 1 && d > opts.dense_dim_limit {
        return Err(PrivacyError::InvalidRelease(format!(
            "block release with J > 1 is limited to d <= {} (got d = {d}); raise dense_dim_limit to override",
            opts.dense_dim_limit
        )));
    }

    let pair_eigs: Vec<PairEigen> = pairs.iter().map(|p| PairEigen::new(cache, p)).collect();
    let jts: Vec<usize> = release.times.iter().map(|&t| table.snap_index(t, 1)).collect();
    let jt_last = *jts.last().unwrap();

    let per_s: Vec<Result<SDivergence, PrivacyError>> = s_grid
        .par_iter()
        .map(|&s| {
            let js = table.snap_index(s, 1);
            if js > jt_last {
                return Ok(SDivergence {
                    s,
                    divergence: 0.0,
                    argmax_pair: 0,
                });
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_pair = 0;
            for (idx, pe) in pair_eigs.iter().enumerate() {
                let div = match release.kind {
                    ReleaseKind::LastIterate => {
                        last_iterate_divergence_fast(table, pe, alpha, js, jt_last)
                    }
                    ReleaseKind::Iterates => {
                        iterates_divergence_dense(table, pe, alpha, js, &jts)
                    }
                    ReleaseKind::Average => {
                        average_divergence_dense(table, pe, alpha, js, &jts)
                    }
                };
                let div = div.map_err(|e| match e {
                    PrivacyError::MixtureNotPd { min_eig, .. } => {
                        PrivacyError::MixtureNotPd { s: Some(s), min_eig }
                    }
                    other => other,
                })?;
                if div > best {
                    best = div;
                    best_pair = idx;
                }
            }
            Ok(SDivergence {
                s,
                divergence: best,
                argmax_pair: best_pair,
            })
        })
        .collect();

    let mut entries = Vec::with_capacity(per_s.len());
    for e in per_s {
        entries.push(e?);
    }

    let in_window: Vec<f64> = entries
        .iter()
        .filter(|e| table.snap_index(e.s, 1) <= jt_last)
        .map(|e| e.divergence)
        .collect();
    let epsilon = mixed_epsilon(alpha, t_last, t_mech, &in_window);

    let (worst_s, argmax_pair) = entries
        .iter()
        .max_by(|a, b| a.divergence.total_cmp(&b.divergence))
        .map(|e| (e.s, e.argmax_pair))
        .unwrap_or((0.0, 0));

    Ok(RdpReport {
        per_s: entries,
        epsilon,
        worst_s,
        argmax_pair,
        t_last,
        alpha,
        sigma: table.sigma(),
    })
}

/// `ε = (1/(α-1)) ln[(T-t)/T + (t/(T·L)) Σ exp((α-1) D_ℓ)]` via log-sum-exp.
fn mixed_epsilon(alpha: f64, t_last: f64, t_mech: f64, divergences: &[f64]) -> f64 {
    let mut terms: Vec<f64> = Vec::with_capacity(divergences.len() + 1);
    let tail = (t_mech - t_last) / t_mech;
    if tail > 0.0 {
        terms.push(tail.ln());
    }
    if divergences.is_empty() {
        // No grid point inside (0, t]: the window carries divergence 0.
        terms.push((t_last / t_mech).ln());
    } else {
        let w = (t_last / (t_mech * divergences.len() as f64)).ln();
        for &dv in divergences {
            terms.push(w + (alpha - 1.0) * dv);
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
    (m + sum.ln()) / (alpha - 1.0)
}

/// A candidate neighboring pair ranked by `‖g(θ)‖₂` with
/// `g(θ) = (b a - b' a') - (a aᵀ - a' a'ᵀ + δI) 1`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ScoredPair {
    pub record_one: usize,
    pub record_two: usize,
    pub score: f64,
}

/// Above this many record pairs a deterministic Bernoulli subsample of about
/// the threshold size is scored instead of the full set.
const PAIR_ENUMERATION_THRESHOLD: usize = 1_000_000;

/// Rank record pairs of the dataset by the privacy-adversity proxy `‖g(θ)‖₂`
/// and return the top `k_top`.
pub fn adversarial_pairs(instance: &ProblemInstance, k_top: usize) -> Vec<ScoredPair> {
    assert!(instance.n_samples >= 2, "need at least two records");
    assert!(k_top >= 1);
    let n = instance.n_samples;
    let d = instance.dim;
    let delta = instance.delta;

    // g(θ) = (b_i - 1ᵀa_i) a_i - (b_j - 1ᵀa_j) a_j - δ1.
    let coef: Vec<f64> = (0..n)
        .map(|i| instance.labels[i] - instance.design.row(i).sum())
        .collect();

    let total_pairs = n * (n - 1) / 2;
    let keep_prob = if total_pairs > PAIR_ENUMERATION_THRESHOLD {
        PAIR_ENUMERATION_THRESHOLD as f64 / total_pairs as f64
    } else {
        1.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70_616c_7061_6972);

    let mut scored: Vec<ScoredPair> = Vec::new();
    let mut g = vec![0.0f64; d];
    for i in 0..n {
        for j in (i + 1)..n {
            if keep_prob < 1.0 && rng.random::<f64>() >= keep_prob {
                continue;
            }
            let ai = instance.design.row(i);
            let aj = instance.design.row(j);
            let mut norm_sq = 0.0;
            for l in 0..d {
                g[l] = coef[i] * ai[l] - coef[j] * aj[l] - delta;
                norm_sq += g[l] * g[l];
            }
            scored.push(ScoredPair {
                record_one: i,
                record_two: j,
                score: norm_sq.sqrt(),
            });
        }
    }
    scored.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.record_one.cmp(&b.record_one))
            .then(a.record_two.cmp(&b.record_two))
    });
    scored.truncate(k_top);
    scored
}
