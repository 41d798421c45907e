//! Command-line driver for the cross-modal attack toolkit.
//!
//! Subcommands walk the full experiment: `gen-data` writes the synthetic
//! benchmark, `train` fits one embedding model per modality, `attack` runs
//! the dense (and optionally sparse) perturbation layers and evaluates them,
//! `ablate` sweeps the evolutionary-layer grid, and `report` re-renders a
//! stored run summary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing artifact,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xmodal::config::ExperimentConfig;
use xmodal::error::Error;
use xmodal::experiment::{cmd_ablate, cmd_attack, cmd_gen_data, cmd_report, cmd_train, AttackMode};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal adversarial attack toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Plain-text key=value config file (one key per line, '#' comments).
    /// Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Run directory for artifacts and reports.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-modality benchmark.
    GenData(CommonArgs),
    /// Train one embedding model per modality.
    Train(CommonArgs),
    /// Run the attack layers and evaluate them.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// grad-only: dense layer alone; dual-layer: dense + evolutionary.
        #[arg(long, default_value = "dual-layer")]
        mode: String,
    },
    /// Sweep the evolutionary layer over the configured ablation grid.
    Ablate(CommonArgs),
    /// Render the stored summary of a finished run.
    Report {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let path = cmd_gen_data(&cfg, &common.out)?;
            println!("wrote {}", path.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let outcome = cmd_train(&cfg, &common.out)?;
            for (m, rank1) in &outcome.clean_rank1 {
                println!("modality {m}: clean rank-1 {rank1:.4}");
            }
            println!("wrote {} checkpoints", outcome.checkpoints.len());
        }
        Command::Attack { common, mode } => {
            let cfg = load_config(&common)?;
            let mode = AttackMode::parse(&mode)?;
            let report = cmd_attack(&cfg, &common.out, mode)?;
            print!("{}", xmodal::report::render_summary(&report));
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let (path, rows) = cmd_ablate(&cfg, &common.out)?;
            println!("wrote {} ({} cells)", path.display(), rows.len());
        }
        Command::Report { out } => {
            print!("{}", cmd_report(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => ExitCode::from(2),
                Error::MissingArtifact(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
