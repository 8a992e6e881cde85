use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepfed::experiment::{load_config, run_experiment, sweep, ExperimentConfig, ExperimentError};

/// Overrides the root that relative `out_dir` paths are resolved against.
const OUT_ROOT_ENV: &str = "DEEPFED_OUT_ROOT";

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "deepfed",
    version,
    about = "Local GD / Local SGD simulator for deep ReLU networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, config.json and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides fed.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of the config's sweep block.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a config and print the resolved form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn resolve_out(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => Path::new(&root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        ExperimentError::Config(_) => ExitCode::from(EXIT_CONFIG),
        ExperimentError::Run(_) => ExitCode::from(EXIT_RUNTIME),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = load_config(path)?;
    cfg.out_dir = resolve_out(&cfg.out_dir);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                print!("{}", cfg.to_json());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run { config, seed, out } => {
            let mut cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(e) => return fail(e),
            };
            if let Some(seed) = seed {
                cfg.fed.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = resolve_out(&out);
            }
            match run_experiment(&cfg) {
                Ok(out) => {
                    println!(
                        "{}: initial loss {:e}, final loss {:e} after {} rounds",
                        out.dir.display(),
                        out.summary.initial_loss,
                        out.summary.final_loss,
                        cfg.fed.rounds
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.into()),
            }
        }
        Command::Sweep { config } => {
            let cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(e) => return fail(e),
            };
            match sweep(&cfg) {
                Ok(out) => {
                    print!("{}", out.summary_csv());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
