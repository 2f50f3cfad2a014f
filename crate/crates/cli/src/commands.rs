//! The experiment pipelines behind each subcommand. Every command reads one
//! config, writes seeded, reproducible CSV payloads plus a manifest, and
//! returns the manifest for inspection.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use hsgd_core::diagnostics::{qq_against_chi_squared, MahalanobisContext};
use hsgd_core::hsgd::LawTable;
use hsgd_core::privacy::{
    adversarial_pairs, rdp_release_with_table, NeighborPair, RdpOptions, RdpReport, ReleaseKind,
    ReleaseSpec,
};
use hsgd_core::problem::{generate_synthetic, ProblemInstance, Schedule};
use hsgd_core::sgd::{doob_diagnostic, run_ensemble, run_sgd, run_sgd_stream};
use hsgd_core::spectral::SpectralCache;
use hsgd_core::volterra::{RiskCurves, VolterraSolver};
use hsgd_core::{hsgd, privacy};

use crate::config::ExperimentConfig;
use crate::output::{config_hash, ensure_dir, fmt17, tag, CsvFile, Manifest};
use crate::CliError;

pub struct RunContext {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub dump_divergences: bool,
}

impl RunContext {
    pub fn new(cfg: &ExperimentConfig, config_text: &str, out_override: Option<PathBuf>) -> Result<Self, CliError> {
        let out_dir = out_override
            .or_else(|| cfg.output.dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        ensure_dir(&out_dir)?;
        Ok(Self {
            out_dir,
            config_hash: config_hash(config_text),
            dump_divergences: false,
        })
    }
}

struct Workspace {
    instance: ProblemInstance,
    cache: SpectralCache,
    schedule: Schedule,
    x0: DVector<f64>,
    horizon: f64,
    grid_step: f64,
}

fn build_workspace(cfg: &ExperimentConfig) -> Result<Workspace, CliError> {
    let instance = cfg.build_instance()?;
    let cache = instance
        .spectral_cache()
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let schedule = cfg.build_schedule(instance.dim)?;
    let x0 = cfg.build_x0(instance.dim);
    let horizon = cfg.resolve_horizon(&instance);
    let grid_step = cfg.resolve_grid_step(&instance);
    Ok(Workspace {
        instance,
        cache,
        schedule,
        x0,
        horizon,
        grid_step,
    })
}

fn base_manifest(command: &str, cfg: &ExperimentConfig, ctx: &RunContext, ws: &Workspace) -> Manifest {
    let mut m = Manifest::new(command, &ctx.config_hash);
    m.seed("problem", cfg.problem.seed);
    m.seed("x0", cfg.run.x0_seed);
    m.seed("sgd", cfg.run.sgd_seed);
    m.input("instance_hash", format!("{:016x}", ws.instance.content_hash()));
    m.input("d", ws.instance.dim);
    m.input("n", ws.instance.n_samples);
    m.input("horizon", fmt17(ws.horizon));
    m.input("grid_step", fmt17(ws.grid_step));
    m
}

/// `risk-curve`: Volterra trajectories plus single-run and ensemble SGD risk
/// tracks per noise scale, with the sup-gap between them in the manifest.
pub fn cmd_risk_curve(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    let ws = build_workspace(cfg)?;
    let mut manifest = base_manifest("risk-curve", cfg, ctx, &ws);
    let solver = VolterraSolver::new(&ws.instance, &ws.cache, &ws.schedule, ws.horizon, ws.grid_step)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let stride = cfg.resolve_record_stride(&ws.instance);
    let steps = ws.instance.n_samples;

    for &sigma in &cfg.run.sigmas {
        let curves = solver
            .solve(&ws.x0, sigma)
            .map_err(|e| CliError::Numeric(e.to_string()))?;

        let mut vfile = CsvFile::create(
            &ctx.out_dir,
            &format!("volterra_sigma{}.csv", tag(sigma)),
            &ctx.config_hash,
            "t,P,R",
        );
        for (j, &t) in curves.grid().iter().enumerate() {
            vfile.row(&[fmt17(t), fmt17(curves.p()[j]), fmt17(curves.r()[j])]);
        }
        manifest.output(&vfile.finish()?);
        manifest.metric(
            &format!("volterra_inputs_hash_sigma{}", tag(sigma)),
            format!("{:016x}", curves.inputs_hash()),
        );

        let traj = run_sgd(
            &ws.instance,
            &ws.schedule,
            &ws.x0,
            sigma,
            cfg.run.sgd_seed,
            stride,
            steps,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut sfile = CsvFile::create(
            &ctx.out_dir,
            &format!("sgd_sigma{}.csv", tag(sigma)),
            &ctx.config_hash,
            "k,t,P,R",
        );
        let mut sup_gap = 0.0f64;
        for s in &traj.risk_track {
            sfile.row(&[s.k.to_string(), fmt17(s.t), fmt17(s.p), fmt17(s.r)]);
            sup_gap = sup_gap.max((s.p - curves.p_interp(s.t)).abs());
        }
        manifest.output(&sfile.finish()?);
        manifest.metric(&format!("sup_gap_sigma{}", tag(sigma)), sup_gap);

        if cfg.run.replicas > 1 {
            let ens = run_ensemble(
                &ws.instance,
                &ws.schedule,
                &ws.x0,
                sigma,
                cfg.run.sgd_seed,
                cfg.run.replicas,
                cfg.run.shuffle,
                stride,
            )
            .map_err(|e| CliError::Numeric(e.to_string()))?;
            let mut efile = CsvFile::create(
                &ctx.out_dir,
                &format!("sgd_ensemble_sigma{}.csv", tag(sigma)),
                &ctx.config_hash,
                "k,t,mean_P,se_P,mean_R,se_R",
            );
            for (j, &k) in ens.recorded_steps.iter().enumerate() {
                efile.row(&[
                    k.to_string(),
                    fmt17(ens.times[j]),
                    fmt17(ens.mean_p[j]),
                    fmt17(ens.std_err_p(j)),
                    fmt17(ens.mean_r[j]),
                    fmt17((ens.var_r[j] / ens.replicas as f64).sqrt()),
                ]);
            }
            manifest.output(&efile.finish()?);
        }
    }
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

fn parse_strategy(name: &str) -> ReleaseKind {
    match name {
        "last" => ReleaseKind::LastIterate,
        "iterates" => ReleaseKind::Iterates,
        "average" => ReleaseKind::Average,
        _ => unreachable!("validated"),
    }
}

fn release_times(cfg: &ExperimentConfig, horizon: f64) -> Vec<f64> {
    cfg.release.times.clone().unwrap_or_else(|| {
        (1..=15).map(|j| horizon * j as f64 / 15.0).collect()
    })
}

/// `privacy`: worst-case Rényi-DP loss curves per (σ, α, strategy) over the
/// adversarially ranked candidate pairs.
pub fn cmd_privacy(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    let ws = build_workspace(cfg)?;
    let mut manifest = base_manifest("privacy", cfg, ctx, &ws);
    let strategy = parse_strategy(&cfg.release.strategy);
    let opts = RdpOptions {
        dense_dim_limit: cfg.release.dense_dim_limit.unwrap_or(128),
    };
    if strategy != ReleaseKind::LastIterate && ws.instance.dim > opts.dense_dim_limit {
        return Err(CliError::Config(format!(
            "strategy '{}' assembles dense block laws and is limited to d <= {} (got d = {}); raise release.dense_dim_limit explicitly to override",
            cfg.release.strategy, opts.dense_dim_limit, ws.instance.dim
        )));
    }

    let scored = adversarial_pairs(&ws.instance, cfg.release.pairs_top_k);
    let pairs: Vec<NeighborPair> = scored
        .iter()
        .map(|sp| NeighborPair::from_records(&ws.instance, sp.record_one, sp.record_two))
        .collect();
    manifest.metric("candidate_pairs", &scored);
    manifest.metric("epsilon_is_upper_bound", true);

    let s_grid: Vec<f64> = privacy::shuffled_index_grid(&ws.instance)
        .into_iter()
        .step_by(cfg.release.s_stride)
        .collect();
    let times = release_times(cfg, ws.horizon);
    let solver = VolterraSolver::new(&ws.instance, &ws.cache, &ws.schedule, ws.horizon, ws.grid_step)
        .map_err(|e| CliError::Numeric(e.to_string()))?;

    let mut efile = CsvFile::create(
        &ctx.out_dir,
        "epsilon.csv",
        &ctx.config_hash,
        "strategy,t,alpha,sigma,epsilon,argmax_record_one,argmax_record_two,worst_s",
    );
    let mut dumps: Vec<(String, serde_json::Value)> = Vec::new();

    for &sigma in &cfg.run.sigmas {
        let curves = solver
            .solve(&ws.x0, sigma)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let table = LawTable::build(&ws.instance, &ws.cache, &ws.schedule, &curves, &ws.x0, sigma)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        for &alpha in &cfg.run.alphas {
            let run_one = |kind: ReleaseKind, release_times: Vec<f64>| -> Result<RdpReport, CliError> {
                let release = ReleaseSpec::new(kind, release_times)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                rdp_release_with_table(
                    &table,
                    &ws.cache,
                    &pairs,
                    alpha,
                    &release,
                    &s_grid,
                    ws.instance.horizon(),
                    &opts,
                )
                .map_err(|e| CliError::Numeric(e.to_string()))
            };

            match strategy {
                ReleaseKind::LastIterate => {
                    for &t in &times {
                        let rep = run_one(ReleaseKind::LastIterate, vec![t])?;
                        write_epsilon_row(&mut efile, "last", t, alpha, sigma, &rep, &scored);
                        if ctx.dump_divergences {
                            dumps.push(divergence_dump("last", t, alpha, sigma, &rep));
                        }
                    }
                }
                ReleaseKind::Iterates => {
                    let rep = run_one(ReleaseKind::Iterates, times.clone())?;
                    write_epsilon_row(&mut efile, "iterates", *times.last().unwrap(), alpha, sigma, &rep, &scored);
                    if ctx.dump_divergences {
                        dumps.push(divergence_dump("iterates", *times.last().unwrap(), alpha, sigma, &rep));
                    }
                }
                ReleaseKind::Average => {
                    let rep = run_one(ReleaseKind::Average, times.clone())?;
                    // Averaging is post-processing of the released block, so
                    // its loss can never exceed the block's.
                    let block = run_one(ReleaseKind::Iterates, times.clone())?;
                    if rep.epsilon > block.epsilon + 1e-12 {
                        return Err(CliError::Numeric(format!(
                            "post-processing violated: average ε {} > iterates ε {} (σ={sigma}, α={alpha})",
                            rep.epsilon, block.epsilon
                        )));
                    }
                    manifest.metric(
                        &format!("iterates_epsilon_sigma{}_alpha{}", tag(sigma), tag(alpha)),
                        block.epsilon,
                    );
                    write_epsilon_row(&mut efile, "average", *times.last().unwrap(), alpha, sigma, &rep, &scored);
                    if ctx.dump_divergences {
                        dumps.push(divergence_dump("average", *times.last().unwrap(), alpha, sigma, &rep));
                    }
                }
            }
        }
    }
    manifest.output(&efile.finish()?);

    if ctx.dump_divergences {
        let path = ctx.out_dir.join("divergences.json");
        let body = serde_json::json!({
            "config_hash": ctx.config_hash,
            "releases": dumps.into_iter().map(|(k, v)| serde_json::json!({"release": k, "data": v})).collect::<Vec<_>>(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&body).expect("serializable"))
            .map_err(|e| CliError::Numeric(format!("write {}: {e}", path.display())))?;
        manifest.output(&path);
    }
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

fn write_epsilon_row(
    file: &mut CsvFile,
    strategy: &str,
    t: f64,
    alpha: f64,
    sigma: f64,
    rep: &RdpReport,
    scored: &[privacy::ScoredPair],
) {
    let pair = scored[rep.argmax_pair];
    file.row(&[
        strategy.to_string(),
        fmt17(t),
        fmt17(alpha),
        fmt17(sigma),
        fmt17(rep.epsilon),
        pair.record_one.to_string(),
        pair.record_two.to_string(),
        fmt17(rep.worst_s),
    ]);
}

fn divergence_dump(strategy: &str, t: f64, alpha: f64, sigma: f64, rep: &RdpReport) -> (String, serde_json::Value) {
    (
        format!("{strategy}_t{}_alpha{}_sigma{}", tag(t), tag(alpha), tag(sigma)),
        serde_json::json!({
            "t": t,
            "alpha": alpha,
            "sigma": sigma,
            "epsilon": rep.epsilon,
            "per_s": rep.per_s,
        }),
    )
}

/// `qq`: Mahalanobis QQ of an SGD ensemble's final iterates against the
/// theoretical law, with an optional control arm sampling from the law.
pub fn cmd_qq(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    let ws = build_workspace(cfg)?;
    let mut manifest = base_manifest("qq", cfg, ctx, &ws);
    let solver = VolterraSolver::new(&ws.instance, &ws.cache, &ws.schedule, ws.horizon, ws.grid_step)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let replicas = cfg.qq.replicas;
    let steps = ws.instance.n_samples;
    let d = ws.instance.dim;

    for &sigma in &cfg.run.sigmas {
        let curves = solver
            .solve(&ws.x0, sigma)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let law = hsgd::hsgd_law(
            &ws.instance,
            &ws.cache,
            &ws.schedule,
            &curves,
            &ws.x0,
            sigma,
            ws.horizon,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        let ctx_m = MahalanobisContext::new(&law).map_err(|e| CliError::Numeric(e.to_string()))?;

        let finals: Vec<DVector<f64>> = if cfg.qq.resample {
            (0..replicas)
                .into_par_iter()
                .map(|r| {
                    let inst_r = ws.instance.resample_records(cfg.qq.data_seed.wrapping_add(r as u64));
                    run_sgd_stream(
                        &inst_r,
                        &ws.schedule,
                        &ws.x0,
                        sigma,
                        cfg.run.sgd_seed,
                        r as u64,
                        steps.max(1),
                        steps,
                    )
                    .map(|t| t.final_iterate().clone())
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Numeric(e.to_string()))?
        } else {
            let ens = run_ensemble(
                &ws.instance,
                &ws.schedule,
                &ws.x0,
                sigma,
                cfg.run.sgd_seed,
                replicas,
                true,
                steps.max(1),
            )
            .map_err(|e| CliError::Numeric(e.to_string()))?;
            (0..replicas)
                .map(|r| ens.final_iterates.row(r).transpose())
                .collect()
        };

        let distances: Result<Vec<f64>, _> = finals.iter().map(|x| ctx_m.squared_distance(x)).collect();
        let distances = distances.map_err(|e| CliError::Numeric(e.to_string()))?;
        let qq = qq_against_chi_squared(&distances, d);
        let mut qfile = CsvFile::create(
            &ctx.out_dir,
            &format!("qq_sigma{}.csv", tag(sigma)),
            &ctx.config_hash,
            "theoretical,empirical",
        );
        for p in &qq.points {
            qfile.row(&[fmt17(p.theoretical), fmt17(p.empirical)]);
        }
        manifest.output(&qfile.finish()?);
        manifest.metric(&format!("qq_slope_sigma{}", tag(sigma)), qq.slope);
        manifest.metric(&format!("qq_intercept_sigma{}", tag(sigma)), qq.intercept);

        if cfg.qq.control {
            let sampler = law.sampler();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.qq.data_seed ^ 0xC0FF_EE00);
            let control_dist: Result<Vec<f64>, _> = (0..replicas)
                .map(|_| ctx_m.squared_distance(&sampler.sample(&mut rng)))
                .collect();
            let control_dist = control_dist.map_err(|e| CliError::Numeric(e.to_string()))?;
            let qq_c = qq_against_chi_squared(&control_dist, d);
            let mut cfile = CsvFile::create(
                &ctx.out_dir,
                &format!("qq_control_sigma{}.csv", tag(sigma)),
                &ctx.config_hash,
                "theoretical,empirical",
            );
            for p in &qq_c.points {
                cfile.row(&[fmt17(p.theoretical), fmt17(p.empirical)]);
            }
            manifest.output(&cfile.finish()?);
            manifest.metric(&format!("qq_control_slope_sigma{}", tag(sigma)), qq_c.slope);
        }
    }
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// `gen-data`: write the synthetic instance as the reproducible JSON
/// container.
pub fn cmd_gen_data(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    let ws = build_workspace(cfg)?;
    let mut manifest = base_manifest("gen-data", cfg, ctx, &ws);
    let path = ctx.out_dir.join("instance.json");
    let record = ws.instance.to_record();
    std::fs::write(
        &path,
        serde_json::to_string(&record).map_err(|e| CliError::Numeric(e.to_string()))?,
    )
    .map_err(|e| CliError::Numeric(format!("write {}: {e}", path.display())))?;
    manifest.output(&path);
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// `doob-check`: Monte Carlo vs closed-form predictable increment at a fixed
/// state, one row per noise scale.
pub fn cmd_doob_check(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    let ws = build_workspace(cfg)?;
    let mut manifest = base_manifest("doob-check", cfg, ctx, &ws);
    let d = ws.instance.dim;
    let x_state = match cfg.doob.state.as_str() {
        "zero" => DVector::zeros(d),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.doob.state_seed);
            DVector::from_fn(d, |_, _| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
        }
    };
    let mut file = CsvFile::create(
        &ctx.out_dir,
        "doob.csv",
        &ctx.config_hash,
        "sigma,k,mc_mean,mc_std_err,predicted,z_score,samples",
    );
    let mut worst: f64 = 0.0;
    for &sigma in &cfg.run.sigmas {
        let rep = doob_diagnostic(
            &ws.instance,
            &ws.schedule,
            &x_state,
            sigma,
            cfg.doob.k,
            cfg.doob.mc_samples,
            cfg.doob.mc_seed,
        );
        file.row(&[
            fmt17(sigma),
            cfg.doob.k.to_string(),
            fmt17(rep.mc_mean),
            fmt17(rep.mc_std_err),
            fmt17(rep.predicted),
            fmt17(rep.z_score),
            rep.samples.to_string(),
        ]);
        worst = worst.max(rep.z_score.abs());
    }
    manifest.output(&file.finish()?);
    manifest.metric("worst_abs_z", worst);
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// `equivalence-sweep`: paired single-run sup-gap between discrete SGD risk
/// and one sampled diffusion path, across dimensions.
pub fn cmd_equivalence_sweep(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Manifest, CliError> {
    // The schedule is resolved once against the config's reference dimension
    // and then held fixed across the sweep, as the continuous-time object.
    let ref_d = cfg.problem.d.unwrap_or(cfg.sweep.dims[0]);
    let schedule = cfg.build_schedule(ref_d)?;
    let mut manifest = Manifest::new("equivalence-sweep", &ctx.config_hash);
    manifest.seed("problem", cfg.problem.seed);
    manifest.seed("sgd", cfg.run.sgd_seed);
    manifest.input("gamma_at_0", fmt17(schedule.gamma(0.0)));

    let mut file = CsvFile::create(
        &ctx.out_dir,
        "sweep.csv",
        &ctx.config_hash,
        "d,sigma,seed,sup_gap",
    );
    for &d in &cfg.sweep.dims {
        let n = (cfg.sweep.n_over_d * d as f64).round() as usize;
        let noise_std = cfg.resolve_noise_std(d);
        let x0 = cfg.build_x0(d);
        let steps_per_unit = cfg.resolve_steps_per_unit_time(d);
        let t_end = n as f64 / d as f64;
        let record_at: Vec<f64> = (0..=n).map(|k| k as f64 / d as f64).collect();

        for &sigma in &cfg.run.sigmas {
            let gaps: Vec<Result<f64, CliError>> = (0..cfg.sweep.seeds)
                .into_par_iter()
                .map(|rep| {
                    let inst = generate_synthetic(
                        d,
                        n,
                        noise_std,
                        cfg.problem.delta,
                        cfg.problem.seed.wrapping_add(rep as u64),
                    );
                    let cache = inst
                        .spectral_cache()
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                    let traj = run_sgd_stream(
                        &inst, &schedule, &x0, sigma, cfg.run.sgd_seed, rep as u64, 1, n,
                    )
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                    let path = hsgd::sample_hsgd_paths(
                        &inst,
                        &cache,
                        &schedule,
                        &x0,
                        sigma,
                        cfg.run.sgd_seed ^ 0x5eed_0000,
                        steps_per_unit,
                        t_end,
                        &record_at,
                        1,
                    );
                    let mut gap = 0.0f64;
                    for (k, s) in traj.risk_track.iter().enumerate() {
                        gap = gap.max((s.p - path.risks[(0, k)]).abs());
                    }
                    Ok(gap)
                })
                .collect();
            let mut values = Vec::with_capacity(gaps.len());
            for g in gaps {
                values.push(g?);
            }
            for (rep, gap) in values.iter().enumerate() {
                file.row(&[
                    d.to_string(),
                    fmt17(sigma),
                    rep.to_string(),
                    fmt17(*gap),
                ]);
            }
            let mut sorted = values.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            manifest.metric(&format!("median_gap_d{}_sigma{}", d, tag(sigma)), median);
        }
    }
    manifest.output(&file.finish()?);
    manifest.write(&ctx.out_dir)?;
    Ok(manifest)
}

/// One curve solve reused by tests that need the raw curves.
pub fn solve_curves(
    ws_instance: &ProblemInstance,
    cache: &SpectralCache,
    schedule: &Schedule,
    x0: &DVector<f64>,
    sigma: f64,
    horizon: f64,
    grid_step: f64,
) -> Result<RiskCurves, CliError> {
    hsgd_core::volterra::solve_volterra(ws_instance, cache, schedule, x0, sigma, horizon, grid_step)
        .map_err(|e| CliError::Numeric(e.to_string()))
}
