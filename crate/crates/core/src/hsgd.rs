//! Exact Gaussian law of the linearized diffusion and an Euler-Maruyama
//! sampler of the full nonlinear dynamics for validation.
//!
//! Replacing the state-dependent risk `P(X_t)` by its deterministic
//! trajectory `P_t` makes the dynamics linear, so the state at time `t` is
//! Gaussian:
//!
//! `mean(t) = Φ(t)x₀ + ∫₀ᵗ Φ(t,u)γ(u)Σx̃ du`,
//! `cov(t)  = ∫₀ᵗ Φ(t,u)γ²(u)Q(u)Φᵀ(t,u) du`,  `Q(u) = (2P_uΣ + σ²I)/d`.
//!
//! `Σ` and `A` commute, so the covariance reduces to `d` scalar integrals per
//! eigendirection, accumulated by the trapezoid rule on the risk-curve grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{gradient_flow_eigen_gamma, ProblemInstance, Schedule};
use crate::sgd::replica_rng;
use crate::spectral::SpectralCache;
use crate::util::one_minus_exp_over;
use crate::volterra::RiskCurves;

#[derive(Debug, Error)]
pub enum HsgdError {
    #[error("time {t} outside the solved horizon [0, {horizon}]")]
    HorizonExceeded { t: f64, horizon: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("law covariance violates invariants: {0}")]
    InvalidLaw(String),
}

/// Mean vector plus covariance matrix; the HSGD state law and every
/// privacy-relevant law.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Check the covariance invariants: symmetric within 1e-10 relative
    /// Frobenius defect, smallest eigenvalue at least `-1e-10 ||cov||`.
    pub fn validate(&self) -> Result<(), HsgdError> {
        if self.cov.nrows() != self.dim() || self.cov.ncols() != self.dim() {
            return Err(HsgdError::DimensionMismatch {
                expected: self.dim(),
                got: self.cov.nrows(),
            });
        }
        let norm = self.cov.norm();
        let defect = (&self.cov - self.cov.transpose()).norm();
        if norm > 0.0 && defect > 1e-10 * norm {
            return Err(HsgdError::InvalidLaw(format!(
                "asymmetry {:.3e} exceeds 1e-10 relative",
                defect / norm
            )));
        }
        let eigs = self.cov.clone().symmetric_eigen().eigenvalues;
        let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eigs.iter().copied().fold(0.0f64, |m, v| m.max(v.abs()));
        if min < -1e-10 * max.max(1e-300) {
            return Err(HsgdError::InvalidLaw(format!(
                "eigenvalue {min:.3e} below -1e-10 ||cov||"
            )));
        }
        Ok(())
    }

    /// Factor the covariance once for repeated sampling.
    pub fn sampler(&self) -> GaussianSampler {
        let eig = self.cov.clone().symmetric_eigen();
        let mut sqrt = eig.eigenvectors.clone();
        for (col, &lam) in eig.eigenvalues.iter().enumerate() {
            sqrt.column_mut(col).scale_mut(lam.max(0.0).sqrt());
        }
        GaussianSampler {
            mean: self.mean.clone(),
            sqrt,
        }
    }
}

/// Cached symmetric square root for drawing from a [`GaussianLaw`].
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    sqrt: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.sqrt * z
    }
}

/// The un-differentiated HSGD law tabulated on the risk-curve grid, stored in
/// the eigenbasis of `A` where both the mean recursion and the covariance are
/// diagonal.
#[derive(Debug, Clone)]
pub struct LawTable {
    dim: usize,
    delta: f64,
    sigma: f64,
    grid: Vec<f64>,
    big_gamma: Vec<f64>,
    gamma_at: Vec<f64>,
    /// `d × (M+1)`: column `j` is the eigenbasis mean at `grid[j]`.
    mean_eb: DMatrix<f64>,
    /// `d × (M+1)`: column `j` is the eigenbasis covariance diagonal.
    var_eb: DMatrix<f64>,
    eigvals: DVector<f64>,
    sigma_eigvals: DVector<f64>,
    y_truth: DVector<f64>,
}

impl LawTable {
    pub fn build(
        instance: &ProblemInstance,
        cache: &SpectralCache,
        schedule: &Schedule,
        curves: &RiskCurves,
        x0: &DVector<f64>,
        sigma: f64,
    ) -> Result<Self, HsgdError> {
        let d = instance.dim;
        if x0.len() != d {
            return Err(HsgdError::DimensionMismatch {
                expected: d,
                got: x0.len(),
            });
        }
        let grid = curves.grid().to_vec();
        let m_pts = grid.len();
        let big_gamma: Vec<f64> = grid.iter().map(|&t| schedule.gamma_integral(t)).collect();
        let gamma_at: Vec<f64> = grid.iter().map(|&t| schedule.gamma(t)).collect();
        let p: Vec<f64> = curves.p().to_vec();

        let y0 = cache.to_eigenbasis(x0);
        let y_truth = cache.to_eigenbasis(&instance.ground_truth);
        let eigvals = cache.eigvals().clone();
        let sigma_eigvals = cache.sigma_eigvals().clone();
        let df = d as f64;

        let mut mean_eb = DMatrix::zeros(d, m_pts);
        let mut var_eb = DMatrix::zeros(d, m_pts);
        for l in 0..d {
            let lam = eigvals[l];
            let sig = sigma_eigvals[l];
            // Exact mean: e^{-λΓ} y0 + σ_l x̃_l (1 - e^{-λΓ})/λ.
            for j in 0..m_pts {
                let x = lam * big_gamma[j];
                mean_eb[(l, j)] =
                    (-x).exp() * y0[l] + sig * y_truth[l] * big_gamma[j] * one_minus_exp_over(x);
            }
            // Trapezoid covariance recursion with exact inter-node decay.
            let integrand = |j: usize| {
                gamma_at[j] * gamma_at[j] * (2.0 * p[j] * sig + sigma * sigma) / df
            };
            let mut v = 0.0;
            var_eb[(l, 0)] = 0.0;
            for j in 1..m_pts {
                let h = grid[j] - grid[j - 1];
                let decay = (-2.0 * lam * (big_gamma[j] - big_gamma[j - 1])).exp();
                v = decay * (v + 0.5 * h * integrand(j - 1)) + 0.5 * h * integrand(j);
                var_eb[(l, j)] = v;
            }
        }

        Ok(Self {
            dim: d,
            delta: instance.delta,
            sigma,
            grid,
            big_gamma,
            gamma_at,
            mean_eb,
            var_eb,
            eigvals,
            sigma_eigvals,
            y_truth,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn sigma_eigvals(&self) -> &DVector<f64> {
        &self.sigma_eigvals
    }

    pub fn y_truth(&self) -> &DVector<f64> {
        &self.y_truth
    }

    pub fn gamma_at(&self, j: usize) -> f64 {
        self.gamma_at[j]
    }

    /// Grid index whose node matches `t` within 1e-9, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let h = if self.grid.len() > 1 {
            self.grid[1] - self.grid[0]
        } else {
            1.0
        };
        let j = ((t / h).round() as isize).clamp(0, self.grid.len() as isize - 1) as usize;
        ((self.grid[j] - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(j)
    }

    /// Nearest grid index, clamped to `[min_index, M]`.
    pub fn snap_index(&self, t: f64, min_index: usize) -> usize {
        let h = if self.grid.len() > 1 {
            self.grid[1] - self.grid[0]
        } else {
            1.0
        };
        let j = (t / h).round().max(0.0) as usize;
        j.clamp(min_index, self.grid.len() - 1)
    }

    pub fn mean_col(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.mean_eb.column(j)
    }

    pub fn var_col(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.var_eb.column(j)
    }

    /// `Φ(t_jt, t_js)` diagonal in the eigenbasis.
    pub fn phi_eigen(&self, js: usize, jt: usize) -> DVector<f64> {
        let dg = self.big_gamma[jt] - self.big_gamma[js];
        self.eigvals.map(|lam| (-lam * dg).exp())
    }

    /// Drift accumulated from `t_js` to `t_jt`:
    /// `∫ Φ(t,u)γ(u)Σx̃ du` per eigendirection (exact).
    pub fn drift_eigen(&self, js: usize, jt: usize) -> DVector<f64> {
        let dg = self.big_gamma[jt] - self.big_gamma[js];
        DVector::from_fn(self.dim, |l, _| {
            let x = self.eigvals[l] * dg;
            self.sigma_eigvals[l] * self.y_truth[l] * dg * one_minus_exp_over(x)
        })
    }

    /// Shared propagated-noise covariance `∫ₛᵗ Φγ²QΦᵀ du` diagonal, via the
    /// table identity `v(t) - Φ² v(s)` (clamped at zero).
    pub fn shared_var_eigen(&self, js: usize, jt: usize) -> DVector<f64> {
        let phi = self.phi_eigen(js, jt);
        DVector::from_fn(self.dim, |l, _| {
            (self.var_eb[(l, jt)] - phi[l] * phi[l] * self.var_eb[(l, js)]).max(0.0)
        })
    }

    /// Dense law at a grid node.
    pub fn law_at_index(&self, cache: &SpectralCache, j: usize) -> GaussianLaw {
        let mean = cache.from_eigenbasis(&self.mean_col(j).clone_owned());
        let cov = cache.mat_from_eigenbasis(&DMatrix::from_diagonal(&self.var_col(j).clone_owned()));
        GaussianLaw { mean, cov }
    }
}

/// Law of the linearized diffusion at time `t`.
pub fn hsgd_law(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    curves: &RiskCurves,
    x0: &DVector<f64>,
    sigma: f64,
    t: f64,
) -> Result<GaussianLaw, HsgdError> {
    let horizon = curves.horizon();
    if t < 0.0 || t > horizon * (1.0 + 1e-12) + 1e-12 {
        return Err(HsgdError::HorizonExceeded { t, horizon });
    }
    let table = LawTable::build(instance, cache, schedule, curves, x0, sigma)?;
    if let Some(j) = table.index_of(t) {
        return Ok(table.law_at_index(cache, j));
    }

    // Off-grid time: closed-form mean at Γ(t), one partial trapezoid step
    // for the covariance from the preceding node of the table.
    let d = instance.dim;
    let df = d as f64;
    let y0 = cache.to_eigenbasis(x0);
    let yt = cache.to_eigenbasis(&instance.ground_truth);
    let big_gamma_t = schedule.gamma_integral(t);
    let mean_eb = gradient_flow_eigen_gamma(cache, big_gamma_t, &y0, &yt);

    let grid = curves.grid();
    let j = grid.partition_point(|&u| u <= t) - 1;
    let p_t = curves.p_interp(t);
    let gamma_t = schedule.gamma(t);
    let gamma_j = schedule.gamma(grid[j]);
    let dt = t - grid[j];
    let mut var = DVector::zeros(d);
    for l in 0..d {
        let lam = cache.eigvals()[l];
        let sig = cache.sigma_eigvals()[l];
        let f_j = gamma_j * gamma_j * (2.0 * curves.p()[j] * sig + sigma * sigma) / df;
        let f_t = gamma_t * gamma_t * (2.0 * p_t * sig + sigma * sigma) / df;
        let decay = (-2.0 * lam * (big_gamma_t - schedule.gamma_integral(grid[j]))).exp();
        var[l] = decay * (table.var_col(j)[l] + 0.5 * dt * f_j) + 0.5 * dt * f_t;
    }
    let mean = cache.from_eigenbasis(&mean_eb);
    let cov = cache.mat_from_eigenbasis(&DMatrix::from_diagonal(&var));
    Ok(GaussianLaw { mean, cov })
}

/// Euler-Maruyama samples of the nonlinear diffusion at `t_end`, with risk
/// values recorded at the requested times.
#[derive(Debug, Clone)]
pub struct HsgdSamples {
    /// `replicas × d`, original basis.
    pub finals: DMatrix<f64>,
    pub record_times: Vec<f64>,
    /// `replicas × record_times.len()`, population risk along each path.
    pub risks: DMatrix<f64>,
}

/// Simulate the nonlinear dynamics
/// `dX = -γ(t)∇R(X) dt + γ(t)√((2P(X)Σ + σ²I)/d) dB`
/// with the matrix square root evaluated spectrally. Deterministic per seed;
/// replica `r` owns stream `r`.
#[allow(clippy::too_many_arguments)]
pub fn sample_hsgd_paths(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    seed: u64,
    steps_per_unit_time: usize,
    t_end: f64,
    record_at: &[f64],
    replicas: usize,
) -> HsgdSamples {
    let d = instance.dim;
    assert_eq!(x0.len(), d, "initial state dimension mismatch");
    assert!(
        steps_per_unit_time >= d,
        "Euler step must be at most 1/d (steps_per_unit_time >= d)"
    );
    assert!(t_end > 0.0 && replicas >= 1);

    let n_steps = ((t_end * steps_per_unit_time as f64).round() as usize).max(1);
    let h = t_end / n_steps as f64;
    let sqrt_h = h.sqrt();
    let record_idx: Vec<usize> = record_at
        .iter()
        .map(|&t| ((t / h).round() as usize).min(n_steps))
        .collect();
    let record_times: Vec<f64> = record_idx.iter().map(|&j| j as f64 * h).collect();

    let y0 = cache.to_eigenbasis(x0);
    let y_truth = cache.to_eigenbasis(&instance.ground_truth);
    let eigvals = cache.eigvals();
    let sig_eigs = cache.sigma_eigvals();
    let df = d as f64;
    let noise2 = instance.noise_second_moment();

    let rows: Vec<(Vec<f64>, DVector<f64>)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let mut y = y0.clone();
            let mut risks = vec![0.0; record_idx.len()];
            let record_risk = |risks: &mut Vec<f64>, step: usize, y: &DVector<f64>| {
                for (slot, &idx) in record_idx.iter().enumerate() {
                    if idx == step {
                        risks[slot] = risk_eigen(sig_eigs, y, &y_truth, noise2);
                    }
                }
            };
            record_risk(&mut risks, 0, &y);
            for step in 0..n_steps {
                let t = step as f64 * h;
                let gamma = schedule.gamma(t);
                let p = risk_eigen(sig_eigs, &y, &y_truth, noise2);
                for l in 0..d {
                    let drift = -gamma * (eigvals[l] * y[l] - sig_eigs[l] * y_truth[l]);
                    let diff = gamma * ((2.0 * p * sig_eigs[l] + sigma * sigma) / df).sqrt();
                    let z: f64 = rng.sample(StandardNormal);
                    y[l] += drift * h + diff * sqrt_h * z;
                }
                record_risk(&mut risks, step + 1, &y);
            }
            (risks, y)
        })
        .collect();

    let mut finals = DMatrix::zeros(replicas, d);
    let mut risks = DMatrix::zeros(replicas, record_idx.len());
    for (r, (rk, y)) in rows.into_iter().enumerate() {
        let x = cache.from_eigenbasis(&y);
        finals.row_mut(r).copy_from(&x.transpose());
        for (c, v) in rk.into_iter().enumerate() {
            risks[(r, c)] = v;
        }
    }
    HsgdSamples {
        finals,
        record_times,
        risks,
    }
}

fn risk_eigen(sig_eigs: &DVector<f64>, y: &DVector<f64>, y_truth: &DVector<f64>, noise2: f64) -> f64 {
    let mut acc = 0.0;
    for l in 0..y.len() {
        let diff = y[l] - y_truth[l];
        acc += sig_eigs[l] * diff * diff;
    }
    0.5 * acc + 0.5 * noise2
}
