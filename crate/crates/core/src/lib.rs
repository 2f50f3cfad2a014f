//! Privacy-utility analysis of one-pass noisy SGD on ℓ2-regularized least
//! squares through its diffusion surrogate.
//!
//! The library models noisy SGD by a continuous-time diffusion whose one
//! discrete step corresponds to a time increment of `1/d`. On quadratic
//! losses this surrogate admits closed forms for everything the analysis
//! needs:
//!
//! - [`spectral`]: one eigendecomposition of `A = Σ + δI` backs every state
//!   transition operator and kernel trace.
//! - [`problem`]: problem instances, synthetic data generation, population
//!   risks, and the gradient-flow baseline.
//! - [`sgd`]: the discrete algorithm itself, seeded ensembles, and a
//!   predictable-increment diagnostic.
//! - [`volterra`]: deterministic risk trajectories `P_t`, `R_t` as solutions
//!   of second-kind Volterra equations.
//! - [`hsgd`]: the exact Gaussian law of the linearized diffusion plus an
//!   Euler-Maruyama sampler of the nonlinear dynamics for validation.
//! - [`privacy`]: neighboring-process coupling, closed-form Gaussian Rényi
//!   divergences, and the mixture bound over a uniform differentiating time
//!   for the three release strategies (last iterate, several iterates, their
//!   average).
//! - [`diagnostics`]: Mahalanobis / χ² QQ goodness-of-fit summaries.

pub mod diagnostics;
pub mod hsgd;
pub mod privacy;
pub mod problem;
pub mod sgd;
pub mod spectral;
pub mod util;
pub mod volterra;

pub use hsgd::{hsgd_law, sample_hsgd_paths, GaussianLaw, HsgdSamples, LawTable};
pub use privacy::{
    adversarial_pairs, couple_at, propagate, rdp_release, rdp_release_with_table, renyi_gaussian,
    NeighborPair, RdpOptions, RdpReport, ReleaseKind, ReleaseSpec,
};
pub use problem::{generate_synthetic, gradient_flow, ProblemInstance, Schedule};
pub use sgd::{doob_diagnostic, run_ensemble, run_sgd, SgdTrajectory};
pub use spectral::{RiskHessian, SpectralCache};
pub use volterra::{solve_volterra, RiskCurves, VolterraSolver};
