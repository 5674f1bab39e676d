//! `har`: synthetic data, ingestion, windowing, training, evaluation,
//! benchmarking and comparison from one binary.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "har", version, about = "Light + accelerometer activity recognition pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for data generation, splitting and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; every output goes under it.
    #[arg(long, global = true, default_value = ".")]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic study (16 subjects, three scenarios).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Seconds per subject session.
        #[arg(long)]
        session_seconds: Option<f64>,
    },
    /// Parse raw CSVs listed in study.json, synchronize, resample and label.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Directory holding study.json (defaults to the run directory).
        #[arg(long)]
        data: Option<std::path::PathBuf>,
    },
    /// Window the ingested recordings, fit normalization, build splits.
    Window {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        model: crossmodal_har::models::Variant,
        /// Use the printed hinge placement of the contrastive loss.
        #[arg(long)]
        eq2_literal: bool,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a trained model on one test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        model: crossmodal_har::models::Variant,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        test_set: u8,
        #[arg(long, value_parser = ["native", "zero-als", "discard-als"])]
        condition: Option<String>,
        /// Also time single-window forward passes.
        #[arg(long)]
        latency: bool,
    },
    /// Time single-window inference of a trained model.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        model: crossmodal_har::models::Variant,
        #[arg(long, default_value_t = 1000)]
        passes: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
    },
    /// Print parameter and FLOP counts per layer for a 60-sample window.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        model: crossmodal_har::models::Variant,
    },
    /// Aggregate report.json files into a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report files (report.json from `eval`).
        #[arg(required = true)]
        reports: Vec<std::path::PathBuf>,
        #[arg(long, value_parser = parse_variant, default_value = "inertial")]
        baseline: crossmodal_har::models::Variant,
    },
}

fn parse_variant(s: &str) -> Result<crossmodal_har::models::Variant, String> {
    s.parse().map_err(|e: crossmodal_har::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<crossmodal_har::Error>()
                .map(|e| e.kind())
                .unwrap_or("pipeline");
            let record = serde_json::json!({
                "error": kind,
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
