use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emstack_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "emstack",
    about = "Trainable slice-sequential segmentation of volumetric EM stacks",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override train.seed / synth.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the architecture profile (toy|full).
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Override io.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on labeled stacks and write a checkpoint plus metrics.
    Train,
    /// Segment stacks with a trained checkpoint and write mask PNGs.
    Infer,
    /// Compute Dice/mIoU tables for labeled stacks.
    Eval,
    /// Train and evaluate all 8 component on/off combinations.
    Ablate,
    /// Generate a synthetic labeled fixture volume.
    Synth,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(profile) = &cli.profile {
        cfg.profile = profile.clone();
    }
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    match cli.command {
        Command::Train => {
            let summary = commands::run_train(&cfg)?;
            println!(
                "trained {} steps; checkpoint at {}",
                summary.steps_run,
                summary.checkpoint.display()
            );
        }
        Command::Infer => {
            let dirs = commands::run_infer(&cfg)?;
            for d in dirs {
                println!("masks written to {}", d.display());
            }
        }
        Command::Eval => {
            commands::run_eval(&cfg)?;
        }
        Command::Ablate => {
            commands::run_ablate(&cfg)?;
        }
        Command::Synth => {
            let dir = commands::run_synth(&cfg)?;
            println!("synthetic volume written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
