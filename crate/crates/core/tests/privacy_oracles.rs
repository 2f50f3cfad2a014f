//! Independent oracles for the privacy module: adaptive-quadrature density
//! integration for the Gaussian Rényi closed form, an exact numeric mixture
//! divergence for the mixture bound, and the ranking heuristic's correlation
//! with the actual divergence.

use hsgd_core::hsgd::{GaussianLaw, LawTable};
use hsgd_core::privacy::{
    adversarial_pairs, rdp_release_with_table, renyi_gaussian, NeighborPair, RdpOptions,
    ReleaseKind, ReleaseSpec,
};
use hsgd_core::problem::{generate_synthetic, Schedule};
use hsgd_core::volterra::solve_volterra;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adaptive Simpson quadrature with absolute tolerance.
fn adaptive_simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    recurse(&f, a, b, simpson(&f, a, b), tol, 48)
}

fn ln_gauss(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// `(1/(α-1)) ln ∫ p₂(x)^α p₁(x)^{1-α} dx` by quadrature. The divergence the
/// closed form computes weights the first law's covariance by α, which is the
/// density integral with the second law's density raised to α.
fn renyi_1d_quadrature(m1: f64, v1: f64, m2: f64, v2: f64, alpha: f64) -> f64 {
    let exponent = |x: f64| alpha * ln_gauss(x, m2, v2) + (1.0 - alpha) * ln_gauss(x, m1, v1);
    // The integrand is exp of a concave quadratic; center the window on its
    // peak so the adaptive rule cannot miss a narrow bump.
    let curv = alpha / v2 + (1.0 - alpha) / v1;
    assert!(curv > 0.0, "divergence infinite: combined precision not positive");
    let peak = (alpha * m2 / v2 + (1.0 - alpha) * m1 / v1) / curv;
    let sd_eff = curv.sqrt().recip();
    let shift = exponent(peak);
    let mut integral = 0.0;
    // 16 panels across ±14 effective standard deviations, each integrated
    // adaptively; truncation beyond the window is far below 1e-10 relative.
    let lo = peak - 14.0 * sd_eff;
    let hi = peak + 14.0 * sd_eff;
    let panel = (hi - lo) / 16.0;
    for k in 0..16 {
        let a = lo + k as f64 * panel;
        integral += adaptive_simpson(|x| (exponent(x) - shift).exp(), a, a + panel, 1e-13);
    }
    (shift + integral.ln()) / (alpha - 1.0)
}

fn law_1d(mean: f64, var: f64) -> GaussianLaw {
    GaussianLaw {
        mean: DVector::from_element(1, mean),
        cov: DMatrix::from_element(1, 1, var),
    }
}

#[test]
fn renyi_closed_form_matches_density_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphas = [1.5, 2.0, 8.0];
    for trial in 0..100 {
        // Keep αV₁ + (1-α)V₂ comfortably positive at the largest order.
        let v1: f64 = 0.5 + 1.5 * rng.random::<f64>();
        let v2: f64 = v1 * (0.8 + 0.3 * rng.random::<f64>());
        let m1: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let m2: f64 = 2.0 * rng.random::<f64>() - 1.0;
        for &alpha in &alphas {
            let closed = renyi_gaussian(&law_1d(m1, v1), &law_1d(m2, v2), alpha).unwrap();
            let quad = renyi_1d_quadrature(m1, v1, m2, v2, alpha);
            assert!(
                (closed - quad).abs() <= 1e-8,
                "trial {trial}, α={alpha}: closed {closed:.12} vs quadrature {quad:.12}"
            );
        }
    }
}

/// Exact numeric Rényi divergence between two 1-D two-component mixtures in
/// the same orientation as `renyi_gaussian`.
fn mixture_renyi_numeric(
    weights: (f64, f64),
    comp1: [(f64, f64); 2],
    comp2: [(f64, f64); 2],
    alpha: f64,
) -> f64 {
    let spread = comp1
        .iter()
        .chain(&comp2)
        .map(|&(_, v)| v.sqrt())
        .fold(0.0f64, f64::max);
    let centers: Vec<f64> = comp1.iter().chain(&comp2).map(|&(m, _)| m).collect();
    let lo = centers.iter().copied().fold(f64::INFINITY, f64::min) - 16.0 * spread;
    let hi = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 16.0 * spread;
    let p1 = move |x: f64| {
        weights.0 * ln_gauss(x, comp1[0].0, comp1[0].1).exp()
            + weights.1 * ln_gauss(x, comp1[1].0, comp1[1].1).exp()
    };
    let p2 = move |x: f64| {
        weights.0 * ln_gauss(x, comp2[0].0, comp2[0].1).exp()
            + weights.1 * ln_gauss(x, comp2[1].0, comp2[1].1).exp()
    };
    let integrand = move |x: f64| p2(x).powf(alpha) * p1(x).powf(1.0 - alpha);
    let panel = (hi - lo) / 64.0;
    let mut integral = 0.0;
    for k in 0..64 {
        let a = lo + k as f64 * panel;
        integral += adaptive_simpson(&integrand, a, a + panel, 1e-13);
    }
    integral.ln() / (alpha - 1.0)
}

#[test]
fn mixture_bound_dominates_exact_mixture_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(515);
    for trial in 0..50 {
        let w1: f64 = 0.2 + 0.6 * rng.random::<f64>();
        let weights = (w1, 1.0 - w1);
        let draw = |rng: &mut ChaCha8Rng| -> (f64, f64) {
            (rng.random::<f64>() - 0.5, 0.6 + 0.8 * rng.random::<f64>())
        };
        let comp1 = [draw(&mut rng), draw(&mut rng)];
        // Component variances of the second mixture stay close to the first
        // so every per-component divergence is finite at α = 4.
        let comp2 = [
            (comp1[0].0 + 0.4 * (rng.random::<f64>() - 0.5), comp1[0].1 * (0.9 + 0.2 * rng.random::<f64>())),
            (comp1[1].0 + 0.4 * (rng.random::<f64>() - 0.5), comp1[1].1 * (0.9 + 0.2 * rng.random::<f64>())),
        ];
        for &alpha in &[2.0, 4.0] {
            let d1 = renyi_gaussian(
                &law_1d(comp1[0].0, comp1[0].1),
                &law_1d(comp2[0].0, comp2[0].1),
                alpha,
            )
            .unwrap();
            let d2 = renyi_gaussian(
                &law_1d(comp1[1].0, comp1[1].1),
                &law_1d(comp2[1].0, comp2[1].1),
                alpha,
            )
            .unwrap();
            let bound = (weights.0 * ((alpha - 1.0) * d1).exp()
                + weights.1 * ((alpha - 1.0) * d2).exp())
            .ln()
                / (alpha - 1.0);
            let exact = mixture_renyi_numeric(weights, comp1, comp2, alpha);
            assert!(
                bound - exact >= -1e-9,
                "trial {trial}, α={alpha}: bound {bound:.10} below exact {exact:.10}"
            );
        }
    }
}

fn privacy_setup(
    d: usize,
    sigma: f64,
    seed: u64,
) -> (
    hsgd_core::problem::ProblemInstance,
    hsgd_core::spectral::SpectralCache,
    Schedule,
    LawTable,
) {
    let inst = generate_synthetic(d, 2 * d, 0.02, 0.1, seed);
    let cache = inst.spectral_cache().unwrap();
    let sched = Schedule::constant(0.05 * d as f64);
    let x0 = DVector::from_fn(d, |i, _| 0.4 - 0.05 * (i % 5) as f64);
    let curves =
        solve_volterra(&inst, &cache, &sched, &x0, sigma, inst.horizon(), 1.0 / d as f64).unwrap();
    let table = LawTable::build(&inst, &cache, &sched, &curves, &x0, sigma).unwrap();
    (inst, cache, sched, table)
}

#[test]
fn divergence_decays_in_release_time() {
    // For fixed s and pair, D_α(t; s, θ) is nonincreasing in t (δ > 0).
    let (inst, cache, _sched, table) = privacy_setup(8, 1.0, 83);
    let pairs = vec![NeighborPair::from_records(&inst, 0, 7)];
    let grid = table.grid().to_vec();
    let s = grid[2];
    let mut last = f64::INFINITY;
    let opts = RdpOptions::default();
    for j in 3..grid.len() {
        let release = ReleaseSpec::new(ReleaseKind::LastIterate, vec![grid[j]]).unwrap();
        let rep = rdp_release_with_table(
            &table,
            &cache,
            &pairs,
            2.0,
            &release,
            &[s],
            inst.horizon(),
            &opts,
        )
        .unwrap();
        let div = rep.per_s[0].divergence;
        assert!(
            div <= last * (1.0 + 1e-9) + 1e-15,
            "divergence grew in t at j={j}: {div} > {last}"
        );
        last = div;
    }
}

#[test]
fn average_release_never_exceeds_iterates_release() {
    // Post-processing sanity on a handful of random small configs.
    let opts = RdpOptions::default();
    for seed in 0..5u64 {
        let (inst, cache, _sched, table) = privacy_setup(6, 1.0 + 0.1 * seed as f64, 100 + seed);
        let pairs = vec![
            NeighborPair::from_records(&inst, 0, 1),
            NeighborPair::from_records(&inst, 2, 5),
        ];
        let grid = table.grid().to_vec();
        let m = grid.len() - 1;
        let times = vec![grid[m / 2], grid[3 * m / 4], grid[m]];
        let s_grid = hsgd_core::privacy::shuffled_index_grid(&inst);
        let iter = rdp_release_with_table(
            &table,
            &cache,
            &pairs,
            2.0,
            &ReleaseSpec::new(ReleaseKind::Iterates, times.clone()).unwrap(),
            &s_grid,
            inst.horizon(),
            &opts,
        )
        .unwrap();
        let avg = rdp_release_with_table(
            &table,
            &cache,
            &pairs,
            2.0,
            &ReleaseSpec::new(ReleaseKind::Average, times).unwrap(),
            &s_grid,
            inst.horizon(),
            &opts,
        )
        .unwrap();
        assert!(
            avg.epsilon <= iter.epsilon + 1e-12,
            "seed {seed}: average ε {} exceeds iterates ε {}",
            avg.epsilon,
            iter.epsilon
        );
    }
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        let mut ranks = vec![0.0; vals.len()];
        for (r, &i) in idx.iter().enumerate() {
            ranks[i] = r as f64;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn adversarial_score_correlates_with_divergence() {
    // Spearman correlation between ‖g(θ)‖ and D_α at a fixed (t, s) over 200
    // sampled record pairs.
    let (inst, cache, _sched, table) = privacy_setup(40, 1.5, 303);
    let grid = table.grid().to_vec();
    let m = grid.len() - 1;
    let s = grid[m / 3];
    let t = grid[m];
    let release = ReleaseSpec::new(ReleaseKind::LastIterate, vec![t]).unwrap();
    let opts = RdpOptions::default();

    let mut rng = ChaCha8Rng::seed_from_u64(9090);
    let scored = adversarial_pairs(&inst, inst.n_samples * (inst.n_samples - 1) / 2);
    let mut scores = Vec::new();
    let mut divs = Vec::new();
    for _ in 0..200 {
        let pick = rng.random_range(0..scored.len());
        let sp = scored[pick];
        let pair = NeighborPair::from_records(&inst, sp.record_one, sp.record_two);
        let rep = rdp_release_with_table(
            &table,
            &cache,
            std::slice::from_ref(&pair),
            2.0,
            &release,
            &[s],
            inst.horizon(),
            &opts,
        )
        .unwrap();
        scores.push(sp.score);
        divs.push(rep.per_s[0].divergence);
    }
    let rho = spearman(&scores, &divs);
    assert!(rho > 0.0, "expected positive rank correlation, got {rho:.3}");
}
