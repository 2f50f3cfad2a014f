//! Second-kind Volterra solver for the deterministic risk trajectories.
//!
//! The expected risks satisfy
//!
//! `P_t = P(X^gf_{Γ(t)}) + ∫₀ᵗ G(t,s;Σ) P_s ds + ∫₀ᵗ G'(t,s;Σ) ds`
//! `R_t = R(X^gf_{Γ(t)}) + ∫₀ᵗ G(t,s;Σ+δI) P_s ds + ∫₀ᵗ G'(t,s;Σ+δI) ds`
//!
//! and are stepped forward on a uniform grid with trapezoidal quadrature;
//! the implicit endpoint moves the unknown `P_j` into the diagonal factor
//! `1 - ½ h G(t_j, t_j; Σ)`. The second equation depends only on solved `P`
//! values, so `R` is accumulated in the same sweep without coupling.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{gradient_flow_eigen_gamma, ProblemInstance, Schedule};
use crate::spectral::SpectralCache;
use crate::util::Fnv1a;

#[derive(Debug, Error)]
pub enum VolterraError {
    #[error("unstable step: diagonal factor {denom:.6e} <= 0, grid step {step:.3e} too coarse")]
    UnstableStep { denom: f64, step: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Deterministic risk trajectories on a uniform time grid.
#[derive(Debug, Clone)]
pub struct RiskCurves {
    grid: Vec<f64>,
    p: Vec<f64>,
    r: Vec<f64>,
    inputs_hash: u64,
}

impl RiskCurves {
    /// Assemble curves from externally computed values (closed-form special
    /// cases serve as test oracles this way).
    pub fn from_parts(grid: Vec<f64>, p: Vec<f64>, r: Vec<f64>, inputs_hash: u64) -> Self {
        Self {
            grid,
            p,
            r,
            inputs_hash,
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn inputs_hash(&self) -> u64 {
        self.inputs_hash
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        if self.grid.len() > 1 {
            self.grid[1] - self.grid[0]
        } else {
            0.0
        }
    }

    /// Grid index matching `t` within 1e-9, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let h = self.step();
        if h == 0.0 {
            return ((self.grid[0] - t).abs() <= 1e-9).then_some(0);
        }
        let j = ((t / h).round() as isize).clamp(0, self.grid.len() as isize - 1) as usize;
        ((self.grid[j] - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(j)
    }

    /// Linear interpolation of `P_t`, clamped to the grid range.
    pub fn p_interp(&self, t: f64) -> f64 {
        interp(&self.grid, &self.p, t)
    }

    /// Linear interpolation of `R_t`, clamped to the grid range.
    pub fn r_interp(&self, t: f64) -> f64 {
        interp(&self.grid, &self.r, t)
    }
}

fn interp(grid: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= grid[0] {
        return values[0];
    }
    if t >= *grid.last().unwrap() {
        return *values.last().unwrap();
    }
    let idx = grid.partition_point(|&u| u <= t);
    let (t0, t1) = (grid[idx - 1], grid[idx]);
    let (v0, v1) = (values[idx - 1], values[idx]);
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

/// Kernel values at one `(t_j, t_i)` node pair. `gp_*` entries carry the
/// full prefactor except `σ²`, so one grid serves every noise scale.
#[derive(Debug, Clone, Copy)]
struct KernelEntry {
    g_pop: f64,
    gp_pop_unit: f64,
    g_reg: f64,
    gp_reg_unit: f64,
}

/// Precomputed kernel grid over the lower triangle `i <= j`; reusable across
/// `(x0, σ)` because the kernels depend only on the spectrum, the schedule,
/// and the grid.
pub struct VolterraSolver<'a> {
    instance: &'a ProblemInstance,
    cache: &'a SpectralCache,
    grid: Vec<f64>,
    big_gamma: Vec<f64>,
    kernels: Vec<KernelEntry>,
    schedule_hash: u64,
}

impl<'a> VolterraSolver<'a> {
    pub fn new(
        instance: &'a ProblemInstance,
        cache: &'a SpectralCache,
        schedule: &Schedule,
        horizon: f64,
        grid_step: f64,
    ) -> Result<Self, VolterraError> {
        if !(grid_step > 0.0) || !(horizon > 0.0) {
            return Err(VolterraError::InvalidGrid(
                "horizon and grid_step must be positive".into(),
            ));
        }
        let m = ((horizon / grid_step - 1e-9).ceil() as usize).max(1);
        let h = horizon / m as f64;
        let grid: Vec<f64> = (0..=m).map(|j| j as f64 * h).collect();
        let big_gamma: Vec<f64> = grid.iter().map(|&t| schedule.gamma_integral(t)).collect();
        let gamma_sq: Vec<f64> = grid.iter().map(|&t| schedule.gamma(t).powi(2)).collect();
        let d = instance.dim as f64;

        // The trace sums dominate the whole solve (O(M²d) exponentials);
        // rows are independent, so build them in parallel and flatten.
        let rows: Vec<Vec<KernelEntry>> = (0..=m)
            .into_par_iter()
            .map(|j| {
                (0..=j)
                    .map(|i| {
                        let sums = cache.kernel_trace_sums(big_gamma[j] - big_gamma[i]);
                        KernelEntry {
                            g_pop: gamma_sq[i] / d * sums.ss,
                            gp_pop_unit: gamma_sq[i] / (2.0 * d) * sums.s,
                            g_reg: gamma_sq[i] / d * sums.sl,
                            gp_reg_unit: gamma_sq[i] / (2.0 * d) * sums.l,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut kernels = Vec::with_capacity((m + 1) * (m + 2) / 2);
        for row in rows {
            kernels.extend(row);
        }

        let mut sh = Fnv1a::new();
        sh.write_f64(schedule.gamma(0.0));
        sh.write_f64(schedule.gamma(horizon / 3.0));
        sh.write_f64(schedule.gamma(horizon));
        sh.write_f64(schedule.gamma_integral(horizon));

        Ok(Self {
            instance,
            cache,
            grid,
            big_gamma,
            kernels,
            schedule_hash: sh.finish(),
        })
    }

    fn entry(&self, j: usize, i: usize) -> &KernelEntry {
        &self.kernels[j * (j + 1) / 2 + i]
    }

    pub fn solve(&self, x0: &DVector<f64>, sigma: f64) -> Result<RiskCurves, VolterraError> {
        let d = self.instance.dim;
        if x0.len() != d {
            return Err(VolterraError::DimensionMismatch {
                expected: d,
                got: x0.len(),
            });
        }
        let m = self.grid.len() - 1;
        let h = if m > 0 { self.grid[1] - self.grid[0] } else { 0.0 };
        let sigma_sq = sigma * sigma;
        let noise2 = self.instance.noise_second_moment();
        let delta = self.instance.delta;

        let y0 = self.cache.to_eigenbasis(x0);
        let y_truth = self.cache.to_eigenbasis(&self.instance.ground_truth);
        let sig_eigs = self.cache.sigma_eigvals();

        // Gradient-flow source terms at every node.
        let mut p_gf = vec![0.0; m + 1];
        let mut r_gf = vec![0.0; m + 1];
        for j in 0..=m {
            let y = gradient_flow_eigen_gamma(self.cache, self.big_gamma[j], &y0, &y_truth);
            let mut quad = 0.0;
            let mut norm_sq = 0.0;
            for l in 0..d {
                let diff = y[l] - y_truth[l];
                quad += sig_eigs[l] * diff * diff;
                norm_sq += y[l] * y[l];
            }
            p_gf[j] = 0.5 * quad + 0.5 * noise2;
            r_gf[j] = p_gf[j] + 0.5 * delta * norm_sq;
        }

        let mut p = vec![0.0; m + 1];
        let mut r = vec![0.0; m + 1];
        // Anchor the initial values to the instance's own risk evaluation so
        // P[0] = P(x0) holds exactly.
        p[0] = self
            .instance
            .population_risk(x0, false)
            .map_err(|_| VolterraError::DimensionMismatch {
                expected: d,
                got: x0.len(),
            })?;
        r[0] = p[0] + 0.5 * delta * x0.norm_squared();

        for j in 1..=m {
            let mut src_gp = 0.5 * self.entry(j, 0).gp_pop_unit;
            let mut quad_p = 0.5 * self.entry(j, 0).g_pop * p[0];
            let mut quad_r = 0.5 * self.entry(j, 0).g_reg * p[0];
            let mut src_gp_r = 0.5 * self.entry(j, 0).gp_reg_unit;
            for i in 1..j {
                let e = self.entry(j, i);
                src_gp += e.gp_pop_unit;
                quad_p += e.g_pop * p[i];
                quad_r += e.g_reg * p[i];
                src_gp_r += e.gp_reg_unit;
            }
            let diag = self.entry(j, j);
            src_gp += 0.5 * diag.gp_pop_unit;
            src_gp_r += 0.5 * diag.gp_reg_unit;

            let denom = 1.0 - 0.5 * h * diag.g_pop;
            if denom <= 0.0 {
                return Err(VolterraError::UnstableStep { denom, step: h });
            }
            p[j] = (p_gf[j] + sigma_sq * h * src_gp + h * quad_p) / denom;
            quad_r += 0.5 * diag.g_reg * p[j];
            r[j] = r_gf[j] + h * quad_r + sigma_sq * h * src_gp_r;
        }

        let mut hash = Fnv1a::new();
        hash.write_u64(self.instance.content_hash());
        hash.write_u64(self.schedule_hash);
        hash.write_f64(sigma);
        hash.write_f64s(x0.iter().copied());
        hash.write_f64(h);
        hash.write_u64(m as u64);

        Ok(RiskCurves {
            grid: self.grid.clone(),
            p,
            r,
            inputs_hash: hash.finish(),
        })
    }
}

/// One-shot solve of both risk trajectories.
pub fn solve_volterra(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    horizon: f64,
    grid_step: f64,
) -> Result<RiskCurves, VolterraError> {
    VolterraSolver::new(instance, cache, schedule, horizon, grid_step)?.solve(x0, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::generate_synthetic;
    use approx::assert_abs_diff_eq;

    #[test]
    fn frozen_dynamics_keep_initial_risk() {
        let inst = generate_synthetic(6, 12, 0.02, 0.1, 3);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(0.0);
        let x0 = DVector::from_element(6, 0.5);
        let curves =
            solve_volterra(&inst, &cache, &sched, &x0, 1.0, inst.horizon(), 1.0 / 6.0).unwrap();
        let p0 = inst.population_risk(&x0, false).unwrap();
        for &p in curves.p() {
            assert_abs_diff_eq!(p, p0, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_source_keeps_risk_at_zero() {
        // σ = 0, noise 0, δ = 0, x₀ = x̃: source and forcing vanish so P ≡ 0.
        let inst = generate_synthetic(5, 10, 0.0, 0.0, 7);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(2.0);
        let x0 = inst.ground_truth.clone();
        let curves =
            solve_volterra(&inst, &cache, &sched, &x0, 0.0, inst.horizon(), 1.0 / 5.0).unwrap();
        for (&p, &r) in curves.p().iter().zip(curves.r()) {
            assert_abs_diff_eq!(p, 0.0, epsilon = 1e-13);
            // δ = 0 makes R coincide with P.
            assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn initial_values_match_instance_risks_exactly() {
        let inst = generate_synthetic(4, 8, 0.03, 0.2, 11);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(1.0);
        let x0 = DVector::from_fn(4, |i, _| 0.1 * i as f64);
        let curves =
            solve_volterra(&inst, &cache, &sched, &x0, 1.5, inst.horizon(), 0.05).unwrap();
        assert_eq!(curves.p()[0], inst.population_risk(&x0, false).unwrap());
        assert_eq!(curves.r()[0], inst.population_risk(&x0, true).unwrap());
    }

    #[test]
    fn risk_is_pointwise_nondecreasing_in_sigma() {
        let inst = generate_synthetic(8, 16, 0.01, 0.1, 17);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(0.4);
        let x0 = DVector::from_element(8, 0.3);
        let solver = VolterraSolver::new(&inst, &cache, &sched, inst.horizon(), 0.02).unwrap();
        let lo = solver.solve(&x0, 1.0).unwrap();
        let hi = solver.solve(&x0, 1.25).unwrap();
        for (a, b) in lo.p().iter().zip(hi.p()) {
            assert!(b >= a, "P must be nondecreasing in σ ({b} < {a})");
        }
    }

    #[test]
    fn self_refinement_converges_at_second_order() {
        let inst = generate_synthetic(8, 16, 0.02, 0.1, 5);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(0.05 * 8.0);
        let x0 = DVector::from_element(8, 0.4);
        let t_end = inst.horizon();
        let coarse = solve_volterra(&inst, &cache, &sched, &x0, 1.0, t_end, 0.02).unwrap();
        let mid = solve_volterra(&inst, &cache, &sched, &x0, 1.0, t_end, 0.01).unwrap();
        let fine = solve_volterra(&inst, &cache, &sched, &x0, 1.0, t_end, 0.005).unwrap();
        // Compare at shared nodes; the error ratio per halving should be ~4.
        let err = |a: &RiskCurves, b: &RiskCurves| -> f64 {
            a.grid()
                .iter()
                .zip(a.p())
                .map(|(&t, &pa)| (pa - b.p_interp(t)).abs())
                .fold(0.0f64, f64::max)
        };
        let e1 = err(&coarse, &fine);
        let e2 = err(&mid, &fine);
        assert!(e1 > 0.0 && e2 > 0.0);
        let ratio = e1 / e2;
        assert!(
            ratio > 2.5,
            "expected ~4x error reduction per halving, got {ratio:.2} ({e1:.3e} vs {e2:.3e})"
        );
    }

    #[test]
    fn index_lookup_and_interp() {
        let inst = generate_synthetic(3, 9, 0.0, 0.1, 2);
        let cache = inst.spectral_cache().unwrap();
        let sched = Schedule::constant(1.0);
        let x0 = DVector::zeros(3);
        let curves =
            solve_volterra(&inst, &cache, &sched, &x0, 0.5, inst.horizon(), 1.0 / 3.0).unwrap();
        assert_eq!(curves.index_of(0.0), Some(0));
        assert_eq!(curves.index_of(1.0), Some(3));
        assert_eq!(curves.index_of(0.5), None);
        let mid = curves.p_interp(0.5);
        assert!(mid >= curves.p()[1].min(curves.p()[2]) && mid <= curves.p()[1].max(curves.p()[2]));
    }
}
