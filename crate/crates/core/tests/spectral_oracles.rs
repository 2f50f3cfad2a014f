//! Independent oracles for the spectral cache: a scaling-and-squaring matrix
//! exponential for the transition operator, dense trace evaluation for the
//! kernel pair, and the semigroup/contraction properties.

use hsgd_core::problem::Schedule;
use hsgd_core::spectral::{RiskHessian, SpectralCache};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense matrix exponential by scaling and squaring with a degree-12 Taylor
/// core. Independent of the eigendecomposition path under test.
fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut acc = DMatrix::identity(n, n);
    for k in 1..=12 {
        term = &term * &scaled / k as f64;
        acc += &term;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

fn random_wishart(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    &g * g.transpose() / d as f64
}

#[test]
fn reconstruction_error_of_wishart_cache() {
    let sigma = random_wishart(8, 42);
    let delta = 0.1;
    let cache = SpectralCache::build(&sigma, delta).unwrap();
    let a = &sigma + DMatrix::identity(8, 8) * delta;
    let err = (cache.reconstruct() - &a).norm();
    assert!(err <= 1e-8 * a.norm(), "reconstruction error {err:.3e}");
    let u = cache.eigvecs();
    let ortho = (u.tr_mul(u) - DMatrix::identity(8, 8)).norm();
    assert!(ortho <= 1e-10, "orthogonality defect {ortho:.3e}");
    for i in 0..8 {
        assert!(cache.sigma_eigvals()[i] >= 0.0);
        assert_eq!(cache.eigvals()[i], cache.sigma_eigvals()[i] + delta);
    }
}

#[test]
fn transition_matches_matrix_exponential_oracle() {
    let sigma = random_wishart(8, 7);
    let cache = SpectralCache::build(&sigma, 0.2).unwrap();
    // γ(t) = 1 + t/2 tabulated on [0, 4].
    let sched = Schedule::tabulated(vec![0.0, 4.0], vec![1.0, 3.0]).unwrap();
    let a = &sigma + DMatrix::identity(8, 8) * 0.2;
    for &(t, s) in &[(0.9, 0.3), (2.5, 0.0), (3.7, 3.7), (1.4, 0.2)] {
        let got = cache.transition(&sched, t, s).unwrap();
        let dgamma = sched.gamma_integral(t) - sched.gamma_integral(s);
        let want = expm(&(-&a * dgamma));
        let err = (got - want).norm();
        assert!(err <= 1e-9, "t={t}, s={s}: Frobenius gap {err:.3e}");
    }
}

#[test]
fn kernel_traces_match_dense_trace_oracle() {
    let sigma = random_wishart(8, 99);
    let delta = 0.15;
    let cache = SpectralCache::build(&sigma, delta).unwrap();
    let sched = Schedule::tabulated(vec![0.0, 3.0], vec![0.8, 2.0]).unwrap();
    let a = &sigma + DMatrix::identity(8, 8) * delta;
    let noise = 1.3;
    for &(t, s) in &[(1.0, 0.25), (2.8, 1.1), (0.6, 0.6)] {
        let dgamma = sched.gamma_integral(t) - sched.gamma_integral(s);
        let phi_sq = expm(&(-&a * (2.0 * dgamma)));
        let gamma_sq = sched.gamma(s).powi(2);
        for hessian in [RiskHessian::Population, RiskHessian::Regularized] {
            let m = match hessian {
                RiskHessian::Population => sigma.clone(),
                RiskHessian::Regularized => a.clone(),
            };
            let want_g = gamma_sq / 8.0 * (&sigma * &m * &phi_sq).trace();
            let want_gp = noise * noise * gamma_sq / 16.0 * (&m * &phi_sq).trace();
            let (g, gp) = cache.kernel_traces(&sched, t, s, noise, hessian).unwrap();
            assert!((g - want_g).abs() <= 1e-10, "G gap {:.3e}", (g - want_g).abs());
            assert!(
                (gp - want_gp).abs() <= 1e-10,
                "G' gap {:.3e}",
                (gp - want_gp).abs()
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_semigroup_property(
        seed in 0u64..1000,
        r in 0.0f64..1.0,
        gap1 in 0.01f64..1.5,
        gap2 in 0.01f64..1.5,
    ) {
        let sigma = random_wishart(6, seed);
        let cache = SpectralCache::build(&sigma, 0.1).unwrap();
        let sched = Schedule::constant(1.2);
        let s = r + gap1;
        let t = s + gap2;
        let phi_ts = cache.transition(&sched, t, s).unwrap();
        let phi_sr = cache.transition(&sched, s, r).unwrap();
        let phi_tr = cache.transition(&sched, t, r).unwrap();
        let gap = (&phi_ts * &phi_sr - &phi_tr).norm();
        prop_assert!(gap <= 1e-9, "semigroup defect {gap:.3e}");
    }

    #[test]
    fn transition_contracts_in_time(
        seed in 0u64..1000,
        s in 0.0f64..1.0,
        gap1 in 0.0f64..1.0,
        gap2 in 0.01f64..1.0,
    ) {
        let sigma = random_wishart(5, seed);
        let cache = SpectralCache::build(&sigma, 0.05).unwrap();
        let sched = Schedule::constant(0.9);
        let t1 = s + gap1;
        let t2 = t1 + gap2;
        let n1 = cache.transition(&sched, t1, s).unwrap().norm();
        let n2 = cache.transition(&sched, t2, s).unwrap().norm();
        prop_assert!(n2 <= n1 + 1e-12, "spectral/Frobenius norm grew: {n1} -> {n2}");
    }

    #[test]
    fn kernels_are_nonnegative(
        seed in 0u64..1000,
        s in 0.0f64..2.0,
        gap in 0.0f64..2.0,
        noise in 0.0f64..3.0,
    ) {
        let sigma = random_wishart(5, seed);
        let cache = SpectralCache::build(&sigma, 0.1).unwrap();
        let sched = Schedule::constant(1.0);
        for hessian in [RiskHessian::Population, RiskHessian::Regularized] {
            let (g, gp) = cache.kernel_traces(&sched, s + gap, s, noise, hessian).unwrap();
            prop_assert!(g >= 0.0 && gp >= 0.0);
        }
    }
}
