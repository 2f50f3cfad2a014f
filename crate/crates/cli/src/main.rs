use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hsgd_cli::commands::{
    cmd_doob_check, cmd_equivalence_sweep, cmd_gen_data, cmd_privacy, cmd_qq, cmd_risk_curve,
    RunContext,
};
use hsgd_cli::config::ExperimentConfig;
use hsgd_cli::CliError;

/// Analyze the privacy-utility tradeoff of one-pass noisy SGD on regularized
/// least squares through its diffusion surrogate.
#[derive(Parser)]
#[command(name = "hsgd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides [output].dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write the per-s divergence arrays (privacy command).
    #[arg(long, global = true)]
    dump_divergences: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Volterra risk trajectories plus SGD risk tracks per noise scale.
    RiskCurve,
    /// Worst-case Rényi-DP loss curves per (sigma, alpha, strategy).
    Privacy,
    /// Mahalanobis QQ of SGD final iterates against the theoretical law.
    Qq,
    /// Generate and save a synthetic instance as JSON.
    GenData,
    /// Monte Carlo check of the one-step predictable increment.
    DoobCheck,
    /// Paired SGD-vs-diffusion sup-gap across dimensions.
    EquivalenceSweep,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let cfg = ExperimentConfig::parse(&text)?;
    let mut ctx = RunContext::new(&cfg, &text, cli.out)?;
    ctx.dump_divergences = cli.dump_divergences;

    let manifest = match cli.command {
        Command::RiskCurve => cmd_risk_curve(&cfg, &ctx)?,
        Command::Privacy => cmd_privacy(&cfg, &ctx)?,
        Command::Qq => cmd_qq(&cfg, &ctx)?,
        Command::GenData => cmd_gen_data(&cfg, &ctx)?,
        Command::DoobCheck => cmd_doob_check(&cfg, &ctx)?,
        Command::EquivalenceSweep => cmd_equivalence_sweep(&cfg, &ctx)?,
    };
    eprintln!(
        "{}: wrote {} file(s) to {}",
        manifest.command,
        manifest.outputs.len() + 1,
        ctx.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
