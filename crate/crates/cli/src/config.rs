//! Experiment configuration: one structured TOML file per run, no positional
//! arguments beyond the subcommand and the config path.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use hsgd_core::problem::{generate_synthetic, ProblemInstance, Schedule};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    pub schedule: ScheduleBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub release: ReleaseBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub qq: QqBlock,
    #[serde(default)]
    pub doob: DoobBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub d: Option<usize>,
    pub n: Option<usize>,
    /// Standard deviation of the regression noise; exactly one of this and
    /// `noise_var_over_d` may be set.
    pub noise_std: Option<f64>,
    /// Sugar for the scaled-noise convention: variance `c/d`, so
    /// `noise_std = sqrt(c/d)`.
    pub noise_var_over_d: Option<f64>,
    pub delta: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Load records from a CSV (features..., label) instead of generating.
    pub csv: Option<String>,
    /// Replace the analytic feature second moment by the empirical one.
    #[serde(default)]
    pub empirical_covariance: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(default = "default_schedule_kind")]
    pub kind: String,
    /// Continuous rate γ; exactly one of `gamma` and `eta` for constant kind.
    pub gamma: Option<f64>,
    /// Discrete step size; resolved as γ = η·d against `problem.d`.
    pub eta: Option<f64>,
    pub times: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Initial iterate: "zero" or "gaussian" (standard normal, seeded).
    #[serde(default = "default_x0")]
    pub x0: String,
    #[serde(default = "default_seed")]
    pub x0_seed: u64,
    #[serde(default = "default_one")]
    pub replicas: usize,
    pub grid_step: Option<f64>,
    pub horizon: Option<f64>,
    #[serde(default = "default_seed")]
    pub sgd_seed: u64,
    /// Risk recording stride; 0 selects the default max(1, d/10).
    #[serde(default)]
    pub record_stride: usize,
    /// Euler resolution of the path sampler; 0 selects the default 4d.
    #[serde(default)]
    pub steps_per_unit_time: usize,
    /// Shuffle record order per ensemble replica.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for RunBlock {
    fn default() -> Self {
        toml::from_str("").expect("empty run block")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseBlock {
    /// "last", "iterates", or "average".
    #[serde(default = "default_strategy")]
    pub strategy: String,
    /// Release times; defaults to a 15-point grid on (0, T] for "last".
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_top_k")]
    pub pairs_top_k: usize,
    /// Thin the differentiating-time grid to every k-th index.
    #[serde(default = "default_one")]
    pub s_stride: usize,
    pub dense_dim_limit: Option<usize>,
}

impl Default for ReleaseBlock {
    fn default() -> Self {
        toml::from_str("").expect("empty release block")
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<String>,
    /// "csv" is always written; adding "json" emits JSON twins of the curves.
    #[serde(default)]
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QqBlock {
    #[serde(default = "default_qq_replicas")]
    pub replicas: usize,
    /// Also run the control arm that samples from the law itself.
    #[serde(default = "default_true")]
    pub control: bool,
    /// Redraw the records per replica (fresh-sample ensemble); otherwise the
    /// shared dataset is shuffled per replica.
    #[serde(default = "default_true")]
    pub resample: bool,
    #[serde(default = "default_seed")]
    pub data_seed: u64,
}

impl Default for QqBlock {
    fn default() -> Self {
        toml::from_str("").expect("empty qq block")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoobBlock {
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub k: usize,
    /// Probed state: "zero" or "gaussian" (seeded).
    #[serde(default = "default_x0_gaussian")]
    pub state: String,
    #[serde(default = "default_seed")]
    pub state_seed: u64,
    #[serde(default = "default_seed")]
    pub mc_seed: u64,
}

impl Default for DoobBlock {
    fn default() -> Self {
        toml::from_str("").expect("empty doob block")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default = "default_sweep_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: usize,
    #[serde(default = "default_n_over_d")]
    pub n_over_d: f64,
}

impl Default for SweepBlock {
    fn default() -> Self {
        toml::from_str("").expect("empty sweep block")
    }
}

fn default_seed() -> u64 {
    1
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_schedule_kind() -> String {
    "constant".into()
}
fn default_sigmas() -> Vec<f64> {
    vec![1.0]
}
fn default_alphas() -> Vec<f64> {
    vec![2.0]
}
fn default_x0() -> String {
    "zero".into()
}
fn default_x0_gaussian() -> String {
    "gaussian".into()
}
fn default_strategy() -> String {
    "last".into()
}
fn default_top_k() -> usize {
    3
}
fn default_qq_replicas() -> usize {
    2000
}
fn default_mc_samples() -> usize {
    1_000_000
}
fn default_sweep_dims() -> Vec<usize> {
    vec![100, 400]
}
fn default_sweep_seeds() -> usize {
    50
}
fn default_n_over_d() -> f64 {
    1.5
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let mut errors = Vec::new();
        if self.problem.csv.is_none() {
            if self.problem.d.is_none() || self.problem.n.is_none() {
                errors.push("[problem] d and n are required unless csv is given".to_string());
            }
            match (self.problem.noise_std, self.problem.noise_var_over_d) {
                (None, None) => errors.push(
                    "[problem] one of noise_std / noise_var_over_d is required for synthetic data"
                        .into(),
                ),
                (Some(_), Some(_)) => errors
                    .push("[problem] noise_std and noise_var_over_d are mutually exclusive".into()),
                (Some(v), None) if v < 0.0 => {
                    errors.push("[problem] noise_std must be nonnegative".into())
                }
                (None, Some(v)) if v < 0.0 => {
                    errors.push("[problem] noise_var_over_d must be nonnegative".into())
                }
                _ => {}
            }
        }
        if self.problem.delta < 0.0 {
            errors.push("[problem] delta must be nonnegative".into());
        }
        match self.schedule.kind.as_str() {
            "constant" => match (self.schedule.gamma, self.schedule.eta) {
                (None, None) => {
                    errors.push("[schedule] constant kind needs gamma or eta".into());
                }
                (Some(_), Some(_)) => {
                    errors.push("[schedule] gamma and eta are mutually exclusive".into())
                }
                (Some(g), None) if g < 0.0 => errors.push("[schedule] gamma must be >= 0".into()),
                (None, Some(e)) if e < 0.0 => errors.push("[schedule] eta must be >= 0".into()),
                _ => {}
            },
            "tabulated" => {
                if self.schedule.times.is_none() || self.schedule.values.is_none() {
                    errors.push("[schedule] tabulated kind needs times and values".into());
                }
            }
            other => errors.push(format!("[schedule] unknown kind '{other}'")),
        }
        if self.run.sigmas.is_empty() || self.run.sigmas.iter().any(|&s| s < 0.0) {
            errors.push("[run] sigmas must be nonempty and nonnegative".into());
        }
        if self.run.alphas.iter().any(|&a| a <= 1.0) {
            errors.push("[run] alphas must exceed 1".into());
        }
        if !matches!(self.run.x0.as_str(), "zero" | "gaussian") {
            errors.push("[run] x0 must be 'zero' or 'gaussian'".into());
        }
        if self.run.replicas == 0 {
            errors.push("[run] replicas must be at least 1".into());
        }
        if let Some(h) = self.run.horizon {
            if !(h > 0.0) {
                errors.push("[run] horizon must be positive".into());
            }
        }
        if let Some(g) = self.run.grid_step {
            if !(g > 0.0) {
                errors.push("[run] grid_step must be positive".into());
            }
        }
        if !matches!(self.release.strategy.as_str(), "last" | "iterates" | "average") {
            errors.push("[release] strategy must be last | iterates | average".into());
        }
        if let Some(times) = &self.release.times {
            if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
                errors.push("[release] times must be nonempty and strictly increasing".into());
            }
        }
        if self.release.s_stride == 0 {
            errors.push("[release] s_stride must be at least 1".into());
        }
        if self.sweep.dims.is_empty() || self.sweep.seeds == 0 {
            errors.push("[sweep] dims must be nonempty and seeds positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errors.join("\n")))
        }
    }

    /// Build the problem instance (synthetic or CSV-backed).
    pub fn build_instance(&self) -> Result<ProblemInstance, CliError> {
        if let Some(path) = &self.problem.csv {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read csv '{path}': {e}")))?;
            let mut inst = ProblemInstance::from_csv(&text, self.problem.delta)
                .map_err(|e| CliError::Config(e.to_string()))?;
            if !self.problem.empirical_covariance {
                // CSV data has no analytic law; the empirical moment is the
                // only choice and is already set by the loader.
            }
            inst.delta = self.problem.delta;
            return Ok(inst);
        }
        let d = self.problem.d.expect("validated");
        let n = self.problem.n.expect("validated");
        let noise_std = self.resolve_noise_std(d);
        let mut inst = generate_synthetic(d, n, noise_std, self.problem.delta, self.problem.seed);
        if self.problem.empirical_covariance {
            inst.covariance = inst.empirical_second_moment();
        }
        Ok(inst)
    }

    pub fn resolve_noise_std(&self, d: usize) -> f64 {
        match (self.problem.noise_std, self.problem.noise_var_over_d) {
            (Some(v), _) => v,
            (None, Some(c)) => (c / d as f64).sqrt(),
            (None, None) => 0.0,
        }
    }

    /// Resolve the continuous schedule against dimension `d`.
    pub fn build_schedule(&self, d: usize) -> Result<Schedule, CliError> {
        match self.schedule.kind.as_str() {
            "constant" => {
                let gamma = match (self.schedule.gamma, self.schedule.eta) {
                    (Some(g), None) => g,
                    (None, Some(eta)) => eta * d as f64,
                    _ => unreachable!("validated"),
                };
                Ok(Schedule::constant(gamma))
            }
            "tabulated" => Schedule::tabulated(
                self.schedule.times.clone().expect("validated"),
                self.schedule.values.clone().expect("validated"),
            )
            .map_err(|e| CliError::Config(e.to_string())),
            _ => unreachable!("validated"),
        }
    }

    pub fn build_x0(&self, d: usize) -> DVector<f64> {
        match self.run.x0.as_str() {
            "zero" => DVector::zeros(d),
            "gaussian" => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.run.x0_seed);
                DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn resolve_horizon(&self, instance: &ProblemInstance) -> f64 {
        self.run.horizon.unwrap_or_else(|| instance.horizon())
    }

    pub fn resolve_grid_step(&self, instance: &ProblemInstance) -> f64 {
        self.run
            .grid_step
            .unwrap_or_else(|| 1.0 / instance.dim as f64)
    }

    pub fn resolve_record_stride(&self, instance: &ProblemInstance) -> usize {
        if self.run.record_stride > 0 {
            self.run.record_stride
        } else {
            (instance.dim / 10).max(1)
        }
    }

    pub fn resolve_steps_per_unit_time(&self, d: usize) -> usize {
        if self.run.steps_per_unit_time > 0 {
            self.run.steps_per_unit_time.max(d)
        } else {
            4 * d
        }
    }

    pub fn wants_json(&self) -> bool {
        self.output.formats.iter().any(|f| f == "json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
d = 8
n = 12
noise_var_over_d = 0.01
delta = 0.1

[schedule]
kind = "constant"
eta = 0.05
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.sigmas, vec![1.0]);
        assert_eq!(cfg.release.strategy, "last");
        let inst = cfg.build_instance().unwrap();
        assert_eq!(inst.dim, 8);
        let sched = cfg.build_schedule(8).unwrap();
        assert!((sched.gamma(0.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn unknown_fields_are_rejected_with_location() {
        let bad = format!("{MINIMAL}\n[run]\nbogus_field = 3\n");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bogus_field"), "message: {msg}");
    }

    #[test]
    fn conflicting_noise_spec_is_rejected() {
        let bad = MINIMAL.replace("noise_var_over_d = 0.01", "noise_var_over_d = 0.01\nnoise_std = 0.1");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn alpha_at_most_one_is_rejected() {
        let bad = format!("{MINIMAL}\n[run]\nalphas = [1.0]\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }
}
