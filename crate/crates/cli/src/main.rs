//! `aim`: dataset generation, pre-training, probing and chunk diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aim_core::data::DataError;
use aim_core::objectives::ObjectiveError;
use aim_core::trainer::TrainError;

#[derive(Parser)]
#[command(name = "aim", version, about = "Autoregressive image-model pre-training and probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic texture dataset with a JSON manifest.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete toy run config to stdout.
    ExampleConfig,
    /// Pre-train from a JSON run config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps are complete.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Train a probe on frozen checkpoint features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::ProbeArg::Attentive)]
        probe: commands::ProbeArg,
        #[arg(long, value_enum, default_value_t = commands::LayersArg::Last)]
        layers: commands::LayersArg,
        /// Attach LoRA adapters of this rank and train them with the probe.
        #[arg(long)]
        lora: Option<usize>,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Comma-separated learning-rate grid.
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-chunk validation loss for one or more checkpoints.
    DiagnoseChunks {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 8)]
        chunks: usize,
        /// Add a column measured on vertically flipped images.
        #[arg(long)]
        flip: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Marks failures caused by invalid arguments or configs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn is_io(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<std::io::Error>()
            || matches!(
                c.downcast_ref::<TrainError>(),
                Some(TrainError::Io(_) | TrainError::Data(DataError::Io(_)))
            )
            || matches!(c.downcast_ref::<DataError>(), Some(DataError::Io(_)))
    })
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<TrainError>(),
                Some(TrainError::InvalidConfig(_) | TrainError::Objective(ObjectiveError::Divisibility { .. }))
            )
            || matches!(c.downcast_ref::<DataError>(), Some(DataError::InvalidArgument(_)))
    })
}

fn report(err: &anyhow::Error) -> ExitCode {
    let (code, kind) = if is_usage(err) {
        (2, "usage")
    } else if is_io(err) {
        (3, "io")
    } else {
        (1, "failure")
    };
    let message = format!("{err:#}").replace('\n', " ");
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData {
            classes,
            per_class,
            side,
            seed,
            out,
        } => commands::gen_data(classes, per_class, side, seed, &out),
        Command::ExampleConfig => commands::example_config(),
        Command::Pretrain {
            config,
            resume,
            stop_at,
        } => commands::pretrain(&config, resume.as_deref(), stop_at),
        Command::Probe {
            checkpoint,
            dataset,
            probe,
            layers,
            lora,
            heads,
            epochs,
            batch_size,
            lrs,
            seed,
            out,
        } => commands::probe(commands::ProbeArgs {
            checkpoint,
            dataset,
            probe,
            layers,
            lora,
            heads,
            epochs,
            batch_size,
            lrs,
            seed,
            out,
        }),
        Command::DiagnoseChunks {
            checkpoints,
            dataset,
            chunks,
            flip,
            out,
        } => commands::diagnose_chunks(&checkpoints, &dataset, chunks, flip, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
