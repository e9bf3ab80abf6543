use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ndi_cli::commands::{self, DEMOS_FILE, DENSITY_FILE};
use ndi_cli::config::ExperimentConfig;
use ndi_cli::{verify, CliError};

#[derive(Parser)]
#[command(name = "ndi", about = "Imitation learning by occupancy density matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample expert demonstrations.
    GenDemos(Common),
    /// Fit the density model to demonstrations.
    FitDensity {
        #[command(flatten)]
        common: Common,
        /// Demonstrations CSV (default: <out>/demos.csv).
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Train policies against a fitted density.
    Train {
        #[command(flatten)]
        common: Common,
        /// Density checkpoint (default: <out>/density.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint, `expert`, or `uniform`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: String,
    },
    /// Check the entropy results numerically.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.out_dir = o.to_string_lossy().into_owned();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDemos(common) => {
            let path = commands::gen_demos(&load(&common)?)?;
            println!("{}", path.display());
        }
        Command::FitDensity { common, demos } => {
            let config = load(&common)?;
            let demos = demos.unwrap_or_else(|| PathBuf::from(&config.out_dir).join(DEMOS_FILE));
            let fit = commands::fit_density(&config, &demos)?;
            println!(
                "{} final loss {:.6}",
                fit.checkpoint.display(),
                fit.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train { common, model } => {
            let config = load(&common)?;
            let model = model.unwrap_or_else(|| PathBuf::from(&config.out_dir).join(DENSITY_FILE));
            let out = commands::train(&config, &model)?;
            for (seed, path) in &out.policies {
                println!("seed {seed}: {}", path.display());
            }
        }
        Command::Eval { common, policy } => {
            let summary = commands::eval(&load(&common)?, &policy)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Verify { suite, seed } => {
            let reports = verify::run(&suite, seed)?;
            for r in &reports {
                print!("{r}");
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite).collect();
            if !failed.is_empty() {
                return Err(CliError::Verification(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
