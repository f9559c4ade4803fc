//! Command-line front end: dataset generation, training, evaluation, and
//! the ablation sweep.
//!
//! Exit codes: 0 success, 1 configuration/validation failure, 2 numerical
//! abort during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use triplenet_core::data::{generate_dataset, save_dataset, GenConfig};
use triplenet_core::net::Network;
use triplenet_core::train::{ablate, evaluate, train, RunConfig};
use triplenet_core::CoreError;

#[derive(Parser)]
#[command(name = "triplenet", version, about = "Joint detection + segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from a JSON run config.
    Train {
        /// Path to a run-config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (manifest.json + images/ + masks/).
        #[arg(long)]
        data: PathBuf,
        /// Also write predictions.jsonl and report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all eight ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the table and per-row artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic shape dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Foreground classes (2..=5).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
    },
}

fn run(cli: Cli) -> triplenet_core::Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = RunConfig::parse_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = train(&cfg)?;
            println!(
                "trained {} iterations; final loss {:.6} (smoothed {:.6})",
                cfg.iterations, outcome.final_total, outcome.final_smoothed
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics_csv.display());
            Ok(())
        }
        Cmd::Eval { checkpoint, data, out } => {
            let net = Network::load(&checkpoint)?;
            let dataset = triplenet_core::data::load_dataset(&data)?;
            let report = evaluate(&net, &dataset, out.as_deref())?;
            println!("{}", report.summary());
            Ok(())
        }
        Cmd::Ablate { config, out } => {
            let mut cfg = RunConfig::parse_file(&config)?;
            cfg.out_dir = out;
            let results = ablate(&cfg)?;
            for r in &results {
                println!("({}) {}: {}", r.row.label, r.row.desc, r.report.summary());
            }
            println!("table: {}", cfg.out_dir.join("ablation.csv").display());
            Ok(())
        }
        Cmd::GenData { out, num, seed, classes, height, width, max_objects } => {
            let gen = GenConfig {
                height,
                width,
                num_classes: classes,
                max_objects,
                ..GenConfig::default()
            };
            let samples = generate_dataset(&gen, num, seed)?;
            save_dataset(&out, &samples, &gen.class_names())?;
            println!("wrote {num} samples to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Numerical { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
