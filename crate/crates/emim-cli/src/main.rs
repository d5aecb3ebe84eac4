//! `emim` — command-line driver for the collapse laboratory.
//!
//! Subcommands wrap the library's workflows and write machine-readable
//! outputs (CSV plus the binary volume/checkpoint formats) into a declared
//! output directory. Exit codes: 0 success, 2 configuration error, 3 missing
//! or malformed input, 4 numerical abort.

mod commands;
mod keys;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "emim", version, about = "Masked-image-modeling collapse laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of key=value lines (one per line, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set gen.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-diversity dataset directory.
    #[command(long_about = keys::GEN_DATA_HELP)]
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for volumes and manifest.
        #[arg(long, default_value = "out/dataset")]
        out: PathBuf,
    },
    /// Monte Carlo masked-view variance, swept over ratios and strategies.
    #[command(long_about = keys::ESTIMATE_VAR_HELP)]
    EstimateVar {
        /// Dataset directory (from gen-data).
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/variance")]
        out: PathBuf,
    },
    /// Draw one mask and write its text serialization.
    #[command(long_about = keys::MASK_PREVIEW_HELP)]
    MaskPreview {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/mask")]
        out: PathBuf,
    },
    /// Run the pretraining loop; writes logs and a checkpoint.
    #[command(long_about = keys::PRETRAIN_HELP)]
    Pretrain {
        /// Dataset directory (from gen-data).
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/pretrain")]
        out: PathBuf,
    },
    /// Collapse report for a checkpoint on a dataset.
    #[command(long_about = keys::DIAGNOSE_HELP)]
    Diagnose {
        /// Checkpoint file (from pretrain).
        checkpoint: PathBuf,
        /// Dataset directory (from gen-data).
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/diagnose")]
        out: PathBuf,
    },
    /// Linear probe of a checkpoint on the synthetic lesion task.
    #[command(long_about = keys::PROBE_HELP)]
    Probe {
        /// Checkpoint file (from pretrain).
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/probe")]
        out: PathBuf,
    },
    /// Train the {random, hmp} × {pbt off, on} grid and tabulate it.
    #[command(long_about = keys::ABLATE_HELP)]
    Ablate {
        /// Dataset directory (from gen-data).
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/ablate")]
        out: PathBuf,
    },
}

fn exit_code_for(err: &emim::Error) -> u8 {
    use emim::Error::*;
    match err {
        MissingInput(_) | Io(_) | BadMagic { .. } | TruncatedPayload { .. }
        | DimensionOverflow { .. } | EmptyDataset => 3,
        NumericalAbort { .. } | NonFinite(_) | AllZeroSpectrum | ZeroNormRow { .. }
        | EmptyMask | DegenerateProbeSet => 4,
        _ => 2,
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("EMIM_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(config, &out),
        Command::EstimateVar { dataset, config, out } => {
            commands::estimate_var(&dataset, config, &out)
        }
        Command::MaskPreview { config, out } => commands::mask_preview(config, &out),
        Command::Pretrain { dataset, config, out } => commands::pretrain(&dataset, config, &out),
        Command::Diagnose {
            checkpoint,
            dataset,
            config,
            out,
        } => commands::diagnose(&checkpoint, &dataset, config, &out),
        Command::Probe {
            checkpoint,
            config,
            out,
        } => commands::probe(&checkpoint, config, &out),
        Command::Ablate { dataset, config, out } => commands::ablate(&dataset, config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> emim::Result<emim::config::ConfigMap> {
        let mut map = match &self.config {
            Some(path) => emim::config::ConfigMap::from_file(path)?,
            None => emim::config::ConfigMap::new(),
        };
        for pair in &self.overrides {
            map.set(pair)?;
        }
        Ok(map)
    }
}
