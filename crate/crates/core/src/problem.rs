//! Regularized least-squares problem instances, synthetic data generation,
//! population risks, and the gradient-flow baseline.
//!
//! A problem is the pair of a dataset `{(a_i, b_i)}` and the population model
//! it was drawn from: labels follow `b = aᵀx̃ + w` with the regression noise
//! `w` truncated at ±3 standard deviations, and the feature second moment
//! `Σ = E[a aᵀ]` is known analytically for synthetic instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::spectral::{SpectralCache, SpectralError};
use crate::util::{one_minus_exp_over, Fnv1a};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time order violated: t = {0} must be nonnegative")]
    TimeOrder(f64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("instance record decode failed: {0}")]
    Decode(String),
    #[error("csv parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Regression noise is truncated at ±3 standard deviations.
pub const NOISE_CLIP_SIGMAS: f64 = 3.0;

/// Continuous learning-rate schedule `γ(t)` with its integral `Γ(t)`.
///
/// Discrete steps relate to it by `η_k = γ(k/d)/d`. `Γ(0) = 0`, `Γ` is
/// nondecreasing, and `γ` is bounded on any finite horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    kind: ScheduleKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ScheduleKind {
    Constant(f64),
    /// Piecewise-linear interpolation of tabulated `(time, γ)` knots, clamped
    /// to the end values outside the table. `cumulative[i]` holds the exact
    /// integral of the interpolant up to `times[i]`.
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
        cumulative: Vec<f64>,
    },
}

impl Schedule {
    pub fn constant(rate: f64) -> Self {
        assert!(rate >= 0.0 && rate.is_finite(), "rate must be finite and nonnegative");
        Self {
            kind: ScheduleKind::Constant(rate),
        }
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self, ProblemError> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(ProblemError::InvalidSchedule(
                "tabulated schedule needs at least two (time, value) knots".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(ProblemError::InvalidSchedule("first knot must be t = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ProblemError::InvalidSchedule("knot times must be strictly increasing".into()));
        }
        if values.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(ProblemError::InvalidSchedule("rates must be finite and nonnegative".into()));
        }
        // The interpolant is linear on each piece, so the trapezoid rule is
        // its exact integral.
        let mut cumulative = vec![0.0; times.len()];
        for i in 1..times.len() {
            cumulative[i] = cumulative[i - 1]
                + 0.5 * (values[i] + values[i - 1]) * (times[i] - times[i - 1]);
        }
        Ok(Self {
            kind: ScheduleKind::Tabulated {
                times,
                values,
                cumulative,
            },
        })
    }

    /// `γ(t)`.
    pub fn gamma(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant(rate) => *rate,
            ScheduleKind::Tabulated { times, values, .. } => {
                if t <= times[0] {
                    return values[0];
                }
                if t >= *times.last().unwrap() {
                    return *values.last().unwrap();
                }
                let idx = times.partition_point(|&x| x <= t);
                let (t0, t1) = (times[idx - 1], times[idx]);
                let (v0, v1) = (values[idx - 1], values[idx]);
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// `Γ(t) = ∫₀ᵗ γ(u) du`, exact for both schedule kinds.
    pub fn gamma_integral(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant(rate) => rate * t,
            ScheduleKind::Tabulated {
                times,
                values,
                cumulative,
            } => {
                if t <= 0.0 {
                    return 0.0;
                }
                let last = *times.last().unwrap();
                if t >= last {
                    return cumulative.last().unwrap() + values.last().unwrap() * (t - last);
                }
                let idx = times.partition_point(|&x| x <= t);
                let (t0, v0) = (times[idx - 1], values[idx - 1]);
                let gm = self.gamma(t);
                cumulative[idx - 1] + 0.5 * (v0 + gm) * (t - t0)
            }
        }
    }
}

/// A regularized least-squares problem together with its population model.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub dim: usize,
    pub n_samples: usize,
    /// `n × d` design matrix of feature rows.
    pub design: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub ground_truth: DVector<f64>,
    /// Standard deviation of the (untruncated) regression noise.
    pub noise_std: f64,
    /// Ridge regularization `δ ≥ 0`.
    pub delta: f64,
    /// Population feature second moment `Σ = E[a aᵀ]` (symmetric PSD).
    pub covariance: DMatrix<f64>,
    /// Generator seed when synthetic, for provenance.
    pub seed: Option<u64>,
}

/// Second moment of a standard normal truncated to `[-c, c]`.
fn truncated_normal_second_moment(c: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mass = 2.0 * std_normal.cdf(c) - 1.0;
    1.0 - 2.0 * c * std_normal.pdf(c) / mass
}

/// Raw moments `E[a_j^r]` of a single `Unif(0, 1/sqrt(d))` feature entry.
pub(crate) fn uniform_feature_moment(d: usize, r: u32) -> f64 {
    (d as f64).powf(-(r as f64) / 2.0) / (r as f64 + 1.0)
}

/// `E[‖a‖² (aᵀv)²]` for the synthetic feature law, from the iid-coordinate
/// moment expansion:
/// `[μ₄ + (d-1)μ₂²]‖v‖² + [2μ₃μ₁ + (d-2)μ₂μ₁²](S² - ‖v‖²)` with `S = Σ v_i`.
pub(crate) fn uniform_fourth_moment_term(d: usize, v: &[f64]) -> f64 {
    let m1 = uniform_feature_moment(d, 1);
    let m2 = uniform_feature_moment(d, 2);
    let m3 = uniform_feature_moment(d, 3);
    let m4 = uniform_feature_moment(d, 4);
    let df = d as f64;
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    let sum: f64 = v.iter().sum();
    (m4 + (df - 1.0) * m2 * m2) * norm_sq + (2.0 * m3 * m1 + (df - 2.0) * m2 * m1 * m1) * (sum * sum - norm_sq)
}

/// Analytic feature second moment `E[a aᵀ]` of the synthetic design law:
/// off-diagonal `μ₁² = 1/(4d)`, diagonal `μ₂ = 1/(3d)`.
pub fn synthetic_second_moment(d: usize) -> DMatrix<f64> {
    let off = uniform_feature_moment(d, 1).powi(2);
    let diag = uniform_feature_moment(d, 2);
    let mut m = DMatrix::from_element(d, d, off);
    for i in 0..d {
        m[(i, i)] = diag;
    }
    m
}

/// Generate a synthetic instance: ground truth and design entries iid
/// `Unif(0, 1/sqrt(d))`, labels `b = A x̃ + w` with `w ~ N(0, noise_std²)`
/// truncated at ±3 standard deviations. Deterministic per seed.
pub fn generate_synthetic(
    d: usize,
    n: usize,
    noise_std: f64,
    delta: f64,
    seed: u64,
) -> ProblemInstance {
    assert!(d >= 1 && n >= 1, "dimensions must be positive");
    assert!(noise_std >= 0.0 && delta >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();

    let ground_truth = DVector::from_fn(d, |_, _| rng.random::<f64>() * scale);
    let design = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * scale);
    let mut labels = &design * &ground_truth;
    if noise_std > 0.0 {
        for i in 0..n {
            labels[i] += noise_std * sample_truncated_standard_normal(&mut rng);
        }
    }

    ProblemInstance {
        dim: d,
        n_samples: n,
        design,
        labels,
        ground_truth,
        noise_std,
        delta,
        covariance: synthetic_second_moment(d),
        seed: Some(seed),
    }
}

fn sample_truncated_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= NOISE_CLIP_SIGMAS {
            return z;
        }
    }
}

impl ProblemInstance {
    /// One-pass horizon `T = n/d` in continuous time.
    pub fn horizon(&self) -> f64 {
        self.n_samples as f64 / self.dim as f64
    }

    /// `E[w²]` of the truncated regression noise; this feeds the constant
    /// term of the population risk and the Volterra source.
    pub fn noise_second_moment(&self) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        self.noise_std.powi(2) * truncated_normal_second_moment(NOISE_CLIP_SIGMAS)
    }

    /// Population risk `P(x) = ½(x-x̃)ᵀΣ(x-x̃) + ½E[w²]`, or the regularized
    /// `R(x) = P(x) + (δ/2)‖x‖²` when `regularized` is set.
    pub fn population_risk(&self, x: &DVector<f64>, regularized: bool) -> Result<f64, ProblemError> {
        if x.len() != self.dim {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let v = x - &self.ground_truth;
        let mut risk = 0.5 * (&self.covariance * &v).dot(&v) + 0.5 * self.noise_second_moment();
        if regularized {
            risk += 0.5 * self.delta * x.norm_squared();
        }
        Ok(risk)
    }

    /// Empirical second moment `AᵀA/n` (the data-driven override of the
    /// analytic `Σ`).
    pub fn empirical_second_moment(&self) -> DMatrix<f64> {
        self.design.tr_mul(&self.design) / self.n_samples as f64
    }

    /// Redraw design and labels from the synthetic law while keeping the
    /// ground truth and every model parameter fixed. Distributional ensembles
    /// condition on `(x̃, x₀)` but treat the records as fresh samples.
    pub fn resample_records(&self, seed: u64) -> ProblemInstance {
        let d = self.dim;
        let n = self.n_samples;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let design = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * scale);
        let mut labels = &design * &self.ground_truth;
        if self.noise_std > 0.0 {
            for i in 0..n {
                labels[i] += self.noise_std * sample_truncated_standard_normal(&mut rng);
            }
        }
        ProblemInstance {
            design,
            labels,
            seed: Some(seed),
            ..self.clone()
        }
    }

    /// Eigendecompose this instance's `Σ + δI`.
    pub fn spectral_cache(&self) -> Result<SpectralCache, SpectralError> {
        SpectralCache::build(&self.covariance, self.delta)
    }

    /// Stable content hash over every field that affects downstream numerics.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.dim as u64);
        h.write_u64(self.n_samples as u64);
        h.write_f64(self.noise_std);
        h.write_f64(self.delta);
        h.write_u64(self.seed.map_or(u64::MAX, |s| s));
        h.write_f64s(self.ground_truth.iter().copied());
        h.write_f64s(self.design.transpose().iter().copied()); // row-major order
        h.write_f64s(self.labels.iter().copied());
        h.write_f64s(self.covariance.iter().copied());
        h.finish()
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            dim: self.dim,
            n_samples: self.n_samples,
            seed: self.seed,
            noise_std: self.noise_std,
            delta: self.delta,
            ground_truth: self.ground_truth.iter().copied().collect(),
            design_row_major: self
                .design
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
            labels: self.labels.iter().copied().collect(),
            covariance_row_major: self
                .covariance
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
        }
    }

    pub fn from_record(rec: InstanceRecord) -> Result<Self, ProblemError> {
        let (d, n) = (rec.dim, rec.n_samples);
        let expect = |name: &str, got: usize, want: usize| -> Result<(), ProblemError> {
            if got != want {
                return Err(ProblemError::Decode(format!(
                    "field {name} has length {got}, expected {want}"
                )));
            }
            Ok(())
        };
        expect("ground_truth", rec.ground_truth.len(), d)?;
        expect("design_row_major", rec.design_row_major.len(), n * d)?;
        expect("labels", rec.labels.len(), n)?;
        expect("covariance_row_major", rec.covariance_row_major.len(), d * d)?;
        Ok(Self {
            dim: d,
            n_samples: n,
            design: DMatrix::from_row_slice(n, d, &rec.design_row_major),
            labels: DVector::from_vec(rec.labels),
            ground_truth: DVector::from_vec(rec.ground_truth),
            noise_std: rec.noise_std,
            delta: rec.delta,
            covariance: DMatrix::from_row_slice(d, d, &rec.covariance_row_major),
            seed: rec.seed,
        })
    }

    /// Load a plain CSV of feature columns with the label in the last column.
    ///
    /// Real data has no known population model, so the ground truth is fit by
    /// ridge regression on the loaded records, the noise level from the
    /// residuals, and `Σ` from the empirical second moment.
    pub fn from_csv(text: &str, delta: f64) -> Result<Self, ProblemError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| ProblemError::Csv {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if row.len() < 2 {
                return Err(ProblemError::Csv {
                    line: idx + 1,
                    message: "need at least one feature column plus the label".into(),
                });
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(ProblemError::Csv {
                        line: idx + 1,
                        message: format!("expected {} columns, got {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(ProblemError::Csv {
                line: 0,
                message: "no data rows".into(),
            });
        }
        let n = rows.len();
        let d = rows[0].len() - 1;
        let design = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let labels = DVector::from_fn(n, |i, _| rows[i][d]);

        // Ridge fit for x̃ and residual spread for the noise level.
        let gram = design.tr_mul(&design) + DMatrix::identity(d, d) * (delta * n as f64);
        let rhs = design.tr_mul(&labels);
        let ground_truth = gram
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(d));
        let residuals = &labels - &design * &ground_truth;
        let noise_std = (residuals.norm_squared() / n as f64).sqrt();
        let covariance = design.tr_mul(&design) / n as f64;

        Ok(Self {
            dim: d,
            n_samples: n,
            design,
            labels,
            ground_truth,
            noise_std,
            delta,
            covariance,
            seed: None,
        })
    }
}

/// JSON container for reproducible instance exchange: dims, seed and flat
/// float64 arrays in row-major order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub dim: usize,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub noise_std: f64,
    pub delta: f64,
    pub ground_truth: Vec<f64>,
    pub design_row_major: Vec<f64>,
    pub labels: Vec<f64>,
    pub covariance_row_major: Vec<f64>,
}

/// Gradient-flow solution `X^gf_{Γ(t)} = Φ(t)x₀ + ∫₀ᵗ Φ(t,u)γ(u)Σx̃ du`,
/// evaluated spectrally.
///
/// The drift integral reduces per eigendirection to
/// `σ_i x̃_i (1 - e^{-λ_i Γ(t)})/λ_i` by the substitution `w = Γ(u)`, which is
/// exact for any schedule.
pub fn gradient_flow(
    instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    x0: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, ProblemError> {
    if t < 0.0 {
        return Err(ProblemError::TimeOrder(t));
    }
    if x0.len() != instance.dim {
        return Err(ProblemError::DimensionMismatch {
            expected: instance.dim,
            got: x0.len(),
        });
    }
    let y0 = cache.to_eigenbasis(x0);
    let yt = cache.to_eigenbasis(&instance.ground_truth);
    let y = gradient_flow_eigen_gamma(cache, schedule.gamma_integral(t), &y0, &yt);
    Ok(cache.from_eigenbasis(&y))
}

/// Gradient flow in eigenbasis coordinates at accumulated rate `Γ(t)`.
pub(crate) fn gradient_flow_eigen_gamma(
    cache: &SpectralCache,
    big_gamma: f64,
    y0: &DVector<f64>,
    y_truth: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(cache.dim(), |i, _| {
        let lam = cache.eigvals()[i];
        let sig = cache.sigma_eigvals()[i];
        let x = lam * big_gamma;
        (-x).exp() * y0[i] + sig * y_truth[i] * big_gamma * one_minus_exp_over(x)
    })
}
