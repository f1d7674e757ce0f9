//! `hypo` — reproducible preference-alignment experiments on synthetic
//! worlds: generate data, train any objective of the family, compare
//! objectives head-to-head, and export heatmap/histogram diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes: 0 success, 2 configuration/validation, 3 I/O, 4 numerical.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn from_core(err: hypo_core::Error) -> Self {
        use hypo_core::Error as E;
        match err {
            E::Io(_) | E::Json(_) => CliError::Io(err.to_string()),
            E::NonFinite { .. } | E::Training { .. } | E::Calibration { .. } => {
                CliError::Numerical(err.to_string())
            }
            _ => CliError::Config(err.to_string()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hypo",
    about = "Preference-alignment lab: DPO, reference-free, and clipped-reference objectives on synthetic worlds",
    version
)]
struct Cli {
    /// Experiment config file(s); compare accepts the flag multiple times.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,

    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory (or the default output path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and train/eval dataset files.
    Datagen,
    /// Train the configured objective; writes a run directory.
    Train,
    /// Train >= 2 configs (identical apart from [objective]) on the same
    /// data and emit joint curves, a win matrix, and a summary table.
    Compare,
    /// Export a gradient-weight heatmap grid as CSV.
    Heatmap(HeatmapArgs),
    /// Export the reference-margin histogram of a dataset as CSV.
    Refstats(RefstatsArgs),
}

#[derive(Args)]
struct HeatmapArgs {
    /// Objective kind: dpo, ref_free, hypo, dpo_sft.
    #[arg(long, default_value = "dpo")]
    objective: String,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Clip threshold (hypo_gamma).
    #[arg(long, alias = "hypo-gamma", default_value_t = 0.0)]
    gamma: f64,
    /// Softplus sharpness; selects the soft hybrid variant.
    #[arg(long)]
    alpha: Option<f64>,
    /// Smoothing temperature tau = 1/alpha; 0 keeps the hard clip.
    #[arg(long, alias = "hypo-tau")]
    tau: Option<f64>,
    /// Home-advantage margin.
    #[arg(long, alias = "h", default_value_t = 0.0)]
    home_advantage: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_sft: f64,
    #[arg(long, default_value_t = -6.0)]
    theta_min: f64,
    #[arg(long, default_value_t = 6.0)]
    theta_max: f64,
    #[arg(long, default_value_t = 121)]
    theta_steps: usize,
    #[arg(long, default_value_t = -6.0)]
    ref_min: f64,
    #[arg(long, default_value_t = 6.0)]
    ref_max: f64,
    #[arg(long, default_value_t = 121)]
    ref_steps: usize,
}

#[derive(Args)]
struct RefstatsArgs {
    /// World file written by datagen.
    #[arg(long)]
    world: PathBuf,
    /// Dataset file written by datagen.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 61)]
    bins: usize,
}

fn single_config(cli: &Cli) -> Result<config::ExperimentConfig, CliError> {
    if cli.config.len() != 1 {
        return Err(CliError::Config(format!(
            "this command needs exactly one --config, got {}",
            cli.config.len()
        )));
    }
    let mut cfg = config::ExperimentConfig::load(&cli.config[0])?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Datagen => commands::datagen(&single_config(cli)?),
        Command::Train => commands::train(&single_config(cli)?),
        Command::Compare => {
            if cli.config.len() < 2 {
                return Err(CliError::Config(format!(
                    "compare needs at least two --config files, got {}",
                    cli.config.len()
                )));
            }
            let mut configs = Vec::with_capacity(cli.config.len());
            for path in &cli.config {
                let mut cfg = config::ExperimentConfig::load(path)?;
                if let Some(seed) = cli.seed {
                    cfg.seed = seed;
                }
                if let Some(out) = &cli.out {
                    cfg.output_dir = out.clone();
                }
                configs.push(cfg);
            }
            commands::compare(&configs)
        }
        Command::Heatmap(args) => commands::heatmap(args, cli.out.as_deref()),
        Command::Refstats(args) => commands::refstats(args, cli.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
