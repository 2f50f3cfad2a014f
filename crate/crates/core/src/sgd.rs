//! One-pass noisy SGD: single trajectories, seeded Monte Carlo ensembles,
//! and the one-step predictable-increment diagnostic.
//!
//! The update is
//! `x_{k+1} = x_k - η_k [(a_k a_kᵀ + δI) x_k - b_k a_k + σ Z_k]`
//! with `η_k = γ(k/d)/d` and `Z_k` iid standard normal from the replica
//! stream. Each record is visited once, in the given or shuffled order.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{uniform_fourth_moment_term, ProblemInstance, Schedule};
use crate::util::CompensatedSum;

#[derive(Debug, Error)]
pub enum SgdError {
    #[error("requested {requested} steps but the instance has only {available} records (one pass)")]
    ExhaustedData { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Population risks evaluated at a recorded iterate.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RiskSample {
    pub k: usize,
    pub t: f64,
    pub p: f64,
    pub r: f64,
}

/// A single noisy-SGD run: strided iterates and the risks along them.
#[derive(Debug, Clone)]
pub struct SgdTrajectory {
    pub recorded_steps: Vec<usize>,
    pub iterates: Vec<DVector<f64>>,
    pub risk_track: Vec<RiskSample>,
    pub seed: u64,
    pub noise_scale: f64,
}

impl SgdTrajectory {
    pub fn final_iterate(&self) -> &DVector<f64> {
        self.iterates.last().expect("trajectory records at least x0")
    }
}

/// Per-replica RNG: one base seed, one counter-based stream per replica, so
/// parallel replicas are independent by construction.
pub(crate) fn replica_rng(base_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replica);
    rng
}

/// Run one-pass noisy SGD for `steps` updates in the instance's record order.
pub fn run_sgd(
    instance: &ProblemInstance,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    seed: u64,
    record_stride: usize,
    steps: usize,
) -> Result<SgdTrajectory, SgdError> {
    run_sgd_stream(instance, schedule, x0, sigma, seed, 0, record_stride, steps)
}

/// Like [`run_sgd`] but on an explicit replica stream of the base seed, so
/// callers can build custom ensembles with independent noise per run.
#[allow(clippy::too_many_arguments)]
pub fn run_sgd_stream(
    instance: &ProblemInstance,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    base_seed: u64,
    stream: u64,
    record_stride: usize,
    steps: usize,
) -> Result<SgdTrajectory, SgdError> {
    let mut rng = replica_rng(base_seed, stream);
    run_sgd_with_rng(
        instance,
        schedule,
        x0,
        sigma,
        base_seed,
        record_stride,
        steps,
        None,
        &mut rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_sgd_with_rng(
    instance: &ProblemInstance,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    seed: u64,
    record_stride: usize,
    steps: usize,
    order: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
) -> Result<SgdTrajectory, SgdError> {
    assert!(record_stride >= 1, "record_stride must be at least 1");
    let d = instance.dim;
    if x0.len() != d {
        return Err(SgdError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if steps > instance.n_samples {
        return Err(SgdError::ExhaustedData {
            requested: steps,
            available: instance.n_samples,
        });
    }

    let dim = d as f64;
    let mut x = x0.clone();
    let mut recorded_steps = Vec::new();
    let mut iterates = Vec::new();
    let mut risk_track = Vec::new();

    let mut record = |k: usize, x: &DVector<f64>| {
        let p = instance
            .population_risk(x, false)
            .expect("dimensions checked above");
        let r = p + 0.5 * instance.delta * x.norm_squared();
        recorded_steps.push(k);
        iterates.push(x.clone());
        risk_track.push(RiskSample {
            k,
            t: k as f64 / dim,
            p,
            r,
        });
    };

    record(0, &x);
    for k in 0..steps {
        let record_idx = order.map_or(k, |ord| ord[k]);
        let a = instance.design.row(record_idx).transpose();
        let b = instance.labels[record_idx];
        let eta = schedule.gamma(k as f64 / dim) / dim;

        let residual = a.dot(&x) - b;
        // x <- x - η[(aᵀx - b) a + δ x + σ Z]
        x.axpy(-eta * residual, &a, 1.0 - eta * instance.delta);
        if sigma > 0.0 {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi -= eta * sigma * z;
            }
        }
        let k1 = k + 1;
        if k1 % record_stride == 0 || k1 == steps {
            record(k1, &x);
        }
    }

    Ok(SgdTrajectory {
        recorded_steps,
        iterates,
        risk_track,
        seed,
        noise_scale: sigma,
    })
}

/// Per-time risk statistics over an ensemble plus the matrix of final iterates.
#[derive(Debug, Clone)]
pub struct EnsembleSummary {
    pub recorded_steps: Vec<usize>,
    pub times: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub var_p: Vec<f64>,
    pub mean_r: Vec<f64>,
    pub var_r: Vec<f64>,
    /// `replicas × d`, one final iterate per row.
    pub final_iterates: DMatrix<f64>,
    pub replicas: usize,
}

impl EnsembleSummary {
    /// Standard error of the ensemble mean of `P` at recorded index `j`.
    pub fn std_err_p(&self, j: usize) -> f64 {
        (self.var_p[j] / self.replicas as f64).sqrt()
    }
}

/// Run `replicas` independent one-pass trajectories. Replica `r` draws from
/// stream `r` of `base_seed`; when `shuffle` is set each replica applies its
/// own uniform permutation to the record order before its pass.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    instance: &ProblemInstance,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    base_seed: u64,
    replicas: usize,
    shuffle: bool,
    record_stride: usize,
) -> Result<EnsembleSummary, SgdError> {
    assert!(replicas >= 1, "need at least one replica");
    let steps = instance.n_samples;

    let runs: Vec<Result<SgdTrajectory, SgdError>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(base_seed, r as u64);
            let order: Option<Vec<usize>> = shuffle.then(|| {
                let mut ord: Vec<usize> = (0..steps).collect();
                ord.shuffle(&mut rng);
                ord
            });
            run_sgd_with_rng(
                instance,
                schedule,
                x0,
                sigma,
                base_seed,
                record_stride,
                steps,
                order.as_deref(),
                &mut rng,
            )
        })
        .collect();

    let mut trajectories = Vec::with_capacity(replicas);
    for run in runs {
        trajectories.push(run?);
    }
    Ok(summarize(&trajectories, instance.dim))
}

fn summarize(trajectories: &[SgdTrajectory], dim: usize) -> EnsembleSummary {
    let replicas = trajectories.len();
    let recorded_steps = trajectories[0].recorded_steps.clone();
    let times: Vec<f64> = trajectories[0].risk_track.iter().map(|s| s.t).collect();
    let n_rec = recorded_steps.len();

    let column_stats = |extract: &dyn Fn(&RiskSample) -> f64| -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(n_rec);
        let mut vars = Vec::with_capacity(n_rec);
        for j in 0..n_rec {
            let mut sum = CompensatedSum::new();
            for traj in trajectories {
                sum.add(extract(&traj.risk_track[j]));
            }
            let mean = sum.total() / replicas as f64;
            let mut sq = CompensatedSum::new();
            for traj in trajectories {
                let dev = extract(&traj.risk_track[j]) - mean;
                sq.add(dev * dev);
            }
            let var = if replicas > 1 {
                sq.total() / (replicas - 1) as f64
            } else {
                0.0
            };
            means.push(mean);
            vars.push(var);
        }
        (means, vars)
    };

    let (mean_p, var_p) = column_stats(&|s| s.p);
    let (mean_r, var_r) = column_stats(&|s| s.r);

    let mut final_iterates = DMatrix::zeros(replicas, dim);
    for (r, traj) in trajectories.iter().enumerate() {
        final_iterates.row_mut(r).copy_from(&traj.final_iterate().transpose());
    }

    EnsembleSummary {
        recorded_steps,
        times,
        mean_p,
        var_p,
        mean_r,
        var_r,
        final_iterates,
        replicas,
    }
}

/// Monte Carlo check of the one-step predictable increment for
/// `q(v) = ½‖v‖²` at a fixed state.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DoobReport {
    pub mc_mean: f64,
    pub mc_std_err: f64,
    pub predicted: f64,
    pub z_score: f64,
    pub samples: usize,
}

/// Draw fresh `(a, b, Z)` triples from the synthetic data law, average the
/// one-step increment of `q(v) = ½‖x - x̃‖²`, and compare against the closed
/// form of its conditional expectation.
///
/// Fresh features are iid `Unif(0, 1/sqrt(d))` entries and labels carry
/// truncated noise, exactly as in the synthetic generator, so this diagnostic
/// applies to synthetic instances.
pub fn doob_diagnostic(
    instance: &ProblemInstance,
    schedule: &Schedule,
    x_state: &DVector<f64>,
    sigma: f64,
    k: usize,
    mc_samples: usize,
    seed: u64,
) -> DoobReport {
    let d = instance.dim;
    assert_eq!(x_state.len(), d, "state dimension mismatch");
    let dim = d as f64;
    let gamma_k = schedule.gamma(k as f64 / dim);
    let eta = gamma_k / dim;
    let scale = 1.0 / dim.sqrt();

    let v = x_state - &instance.ground_truth;
    let predicted = doob_predicted(instance, x_state, &v, sigma, gamma_k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut a = DVector::<f64>::zeros(d);
    let mut g = DVector::<f64>::zeros(d);
    for m in 0..mc_samples {
        for ai in a.iter_mut() {
            *ai = rng.random::<f64>() * scale;
        }
        let xi = if instance.noise_std > 0.0 {
            loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= crate::problem::NOISE_CLIP_SIGMAS {
                    break instance.noise_std * z;
                }
            }
        } else {
            0.0
        };
        // g = (aᵀx - b) a + δx + σZ, with b = aᵀx̃ + ξ.
        let residual = a.dot(&v) - xi;
        g.copy_from(&a);
        g.scale_mut(residual);
        g.axpy(instance.delta, x_state, 1.0);
        if sigma > 0.0 {
            for gi in g.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *gi += sigma * z;
            }
        }
        // ½‖v - ηg‖² - ½‖v‖², expanded to avoid cancellation.
        let inc = -eta * g.dot(&v) + 0.5 * eta * eta * g.norm_squared();
        let delta_mean = inc - mean;
        mean += delta_mean / (m + 1) as f64;
        m2 += delta_mean * (inc - mean);
    }
    let var = if mc_samples > 1 {
        m2 / (mc_samples - 1) as f64
    } else {
        0.0
    };
    let std_err = (var / mc_samples as f64).sqrt();
    let diff = mean - predicted;
    let z_score = if std_err > 0.0 {
        diff / std_err
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    DoobReport {
        mc_mean: mean,
        mc_std_err: std_err,
        predicted,
        z_score,
        samples: mc_samples,
    }
}

/// Closed-form conditional expectation of the `q(v) = ½‖v‖²` increment:
/// `-(γ/d) vᵀ∇R(x) + (γ²/2d²)(E‖∇f(x)‖² + σ² d)` with
/// `E‖∇f‖² = E[‖a‖²(aᵀv)²] + E[‖a‖²]E[ξ²] + 2δ xᵀΣv + δ²‖x‖²`.
fn doob_predicted(
    instance: &ProblemInstance,
    x: &DVector<f64>,
    v: &DVector<f64>,
    sigma: f64,
    gamma_k: f64,
) -> f64 {
    let d = instance.dim;
    let dim = d as f64;
    if gamma_k == 0.0 {
        return 0.0;
    }
    let sigma_v = &instance.covariance * v;
    let grad_r = &sigma_v + x * instance.delta;
    let noise2 = instance.noise_second_moment();

    let fourth = uniform_fourth_moment_term(d, v.as_slice());
    let mean_sq_feature_norm = dim * crate::problem::uniform_feature_moment(d, 2);
    let grad_f_sq = fourth
        + mean_sq_feature_norm * noise2
        + 2.0 * instance.delta * x.dot(&sigma_v)
        + instance.delta.powi(2) * x.norm_squared();

    -(gamma_k / dim) * v.dot(&grad_r)
        + gamma_k.powi(2) / (2.0 * dim * dim) * (grad_f_sq + sigma * sigma * dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::generate_synthetic;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_rate_freezes_iterates() {
        let inst = generate_synthetic(4, 6, 0.01, 0.1, 3);
        let sched = Schedule::constant(0.0);
        let x0 = DVector::from_element(4, 0.7);
        let traj = run_sgd(&inst, &sched, &x0, 0.0, 1, 1, 6).unwrap();
        for x in &traj.iterates {
            assert_abs_diff_eq!((x - &x0).norm(), 0.0, epsilon = 0.0);
        }
    }

    #[test]
    fn one_step_arithmetic() {
        // d = 1, x0 = 1, a0 = 1, b0 = 0, δ = 0, η0 = 0.5, σ = 0 -> x1 = 0.5.
        let inst = ProblemInstance {
            dim: 1,
            n_samples: 1,
            design: DMatrix::from_element(1, 1, 1.0),
            labels: DVector::from_element(1, 0.0),
            ground_truth: DVector::from_element(1, 0.0),
            noise_std: 0.0,
            delta: 0.0,
            covariance: DMatrix::from_element(1, 1, 1.0),
            seed: None,
        };
        // η_0 = γ(0)/d = 0.5 with γ ≡ 0.5 and d = 1.
        let sched = Schedule::constant(0.5);
        let x0 = DVector::from_element(1, 1.0);
        let traj = run_sgd(&inst, &sched, &x0, 0.0, 1, 1, 1).unwrap();
        assert_abs_diff_eq!(traj.final_iterate()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trajectory_is_deterministic_per_seed() {
        let inst = generate_synthetic(6, 10, 0.05, 0.1, 17);
        let sched = Schedule::constant(1.0);
        let x0 = DVector::zeros(6);
        let a = run_sgd(&inst, &sched, &x0, 1.5, 99, 2, 10).unwrap();
        let b = run_sgd(&inst, &sched, &x0, 1.5, 99, 2, 10).unwrap();
        for (xa, xb) in a.iterates.iter().zip(&b.iterates) {
            assert_eq!(xa, xb);
        }
        let c = run_sgd(&inst, &sched, &x0, 1.5, 100, 2, 10).unwrap();
        assert_ne!(a.final_iterate(), c.final_iterate());
    }

    #[test]
    fn risk_track_is_recomputable_from_iterates() {
        let inst = generate_synthetic(5, 12, 0.05, 0.1, 23);
        let sched = Schedule::constant(2.0);
        let x0 = DVector::from_element(5, 0.3);
        let traj = run_sgd(&inst, &sched, &x0, 1.0, 7, 3, 12).unwrap();
        for (x, s) in traj.iterates.iter().zip(&traj.risk_track) {
            let p = inst.population_risk(x, false).unwrap();
            let r = inst.population_risk(x, true).unwrap();
            assert_abs_diff_eq!(p, s.p, epsilon = 1e-12);
            assert_abs_diff_eq!(r, s.r, epsilon = 1e-12);
        }
    }

    #[test]
    fn exhausted_data_is_reported() {
        let inst = generate_synthetic(3, 4, 0.0, 0.1, 1);
        let sched = Schedule::constant(1.0);
        let x0 = DVector::zeros(3);
        assert!(matches!(
            run_sgd(&inst, &sched, &x0, 0.0, 1, 1, 5),
            Err(SgdError::ExhaustedData { .. })
        ));
    }

    #[test]
    fn single_replica_ensemble_matches_trajectory() {
        let inst = generate_synthetic(4, 8, 0.02, 0.1, 31);
        let sched = Schedule::constant(1.0);
        let x0 = DVector::zeros(4);
        let traj = run_sgd(&inst, &sched, &x0, 0.5, 12, 2, 8).unwrap();
        let ens = run_ensemble(&inst, &sched, &x0, 0.5, 12, 1, false, 2).unwrap();
        for (j, s) in traj.risk_track.iter().enumerate() {
            assert_abs_diff_eq!(ens.mean_p[j], s.p, epsilon = 1e-15);
            assert_eq!(ens.var_p[j], 0.0);
        }
    }

    #[test]
    fn deterministic_dynamics_have_zero_ensemble_variance() {
        let inst = generate_synthetic(4, 8, 0.0, 0.1, 5);
        let sched = Schedule::constant(0.0);
        let x0 = DVector::from_element(4, 1.0);
        let ens = run_ensemble(&inst, &sched, &x0, 0.0, 3, 8, false, 2).unwrap();
        for v in &ens.var_p {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn doob_zero_rate_is_identically_zero() {
        let inst = generate_synthetic(5, 8, 0.02, 0.1, 2);
        let sched = Schedule::constant(0.0);
        let x = DVector::from_element(5, 0.4);
        let rep = doob_diagnostic(&inst, &sched, &x, 1.0, 0, 2_000, 11);
        assert_eq!(rep.mc_mean, 0.0);
        assert_eq!(rep.predicted, 0.0);
        assert_eq!(rep.z_score, 0.0);
    }

    #[test]
    fn doob_small_dim_agrees_with_mc() {
        let inst = generate_synthetic(8, 12, 0.05, 0.1, 4);
        let sched = Schedule::constant(1.0);
        let x = DVector::from_fn(8, |i, _| 0.2 * (i as f64 - 3.0));
        for &sigma in &[0.0, 1.0] {
            let rep = doob_diagnostic(&inst, &sched, &x, sigma, 3, 400_000, 19);
            assert!(
                rep.z_score.abs() < 4.0,
                "sigma {sigma}: z = {}, mc = {}, predicted = {}",
                rep.z_score,
                rep.mc_mean,
                rep.predicted
            );
        }
    }
}
