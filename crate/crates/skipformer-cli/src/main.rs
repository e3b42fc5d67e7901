//! `skipformer` — drive the compute-skipping runtime from the shell.
//!
//! Subcommands: `generate` (tokens + exact FLOPs), `schedule` (inspect the
//! per-layer action table), `prune` (build and apply weight masks),
//! `compare` (runtime vs full-recompute reference), `sweep` (CSV over a
//! policy axis), and `synth` (write a seeded model file).
//!
//! Exit codes are a stable contract: 0 success, 1 validation error,
//! 2 runtime/format error, 3 comparison failure. Logging is controlled by
//! `SKIPFORMER_LOG` (error, info, debug; default error).

mod commands;
mod config;

use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "skipformer",
    version,
    about = "Decoder-only transformer runtime with structural compute-skipping policies"
)]
pub(crate) struct Cli {
    /// Path to a JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub(crate) config: Option<PathBuf>,

    /// Override the seed (synthetic model synthesis and random pruning).
    #[arg(long, global = true)]
    pub(crate) seed: Option<u64>,

    /// Output path (JSON, CSV, or model container, depending on command).
    #[arg(long, global = true, value_name = "PATH")]
    pub(crate) output: Option<PathBuf>,

    /// Print machine-readable JSON to stdout instead of a summary.
    #[arg(long, global = true)]
    pub(crate) json: bool,

    #[command(subcommand)]
    pub(crate) command: Command,
}

#[derive(Subcommand)]
pub(crate) enum Command {
    /// Generate tokens under the configured policy and report exact FLOPs.
    Generate,

    /// Resolve and print the per-layer action schedule.
    Schedule {
        /// Resolve for this many layers instead of the configured model's.
        #[arg(long)]
        n_layers: Option<usize>,
    },

    /// Build pruning masks, apply them, and write the pruned model.
    ///
    /// Writes the pruned model to --output, plus `<stem>.masks.mllw` and
    /// `<stem>.sparsity.json` next to it.
    Prune {
        /// Scoring method: wanda, magnitude, or random.
        #[arg(long)]
        method: String,

        /// Fraction of weights to drop per output feature (0 <= s < 1).
        #[arg(long)]
        sparsity: f64,

        /// Calibration token scope: P, T, or P+T.
        #[arg(long, default_value = "P+T")]
        scope: String,

        /// Directory of calibration prompt JSON files (required for wanda).
        #[arg(long, value_name = "DIR")]
        calib_dir: Option<PathBuf>,
    },

    /// Run the incremental runtime against the full-recompute reference.
    ///
    /// Always decodes max_new steps on both sides (eos_id is ignored) so the
    /// step streams stay aligned.
    Compare {
        /// Decode steps to compare (default: configured max_new_tokens).
        #[arg(long)]
        max_new: Option<usize>,

        /// Maximum tolerated per-step logit deviation (max-abs).
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f32,

        /// Compare every mode x scope combination, not just the configured
        /// policy.
        #[arg(long)]
        all_policies: bool,

        /// Test hook: additively corrupt the first cached key at this layer
        /// after prefill, to demonstrate divergence detection.
        #[arg(long, hide = true, value_name = "LAYER")]
        corrupt_cache: Option<usize>,
    },

    /// Emit a CSV sweeping one policy axis against cost and deviation.
    ///
    /// Columns: value, skipped_fraction, flops_reduction, depth_stages, and
    /// the max-abs final-step logit deviation from a dense run. An interval
    /// value beyond the layer count disables the policy, yielding a dense
    /// row with deviation exactly zero.
    Sweep {
        /// Axis to sweep: interval or start_layer.
        #[arg(long)]
        axis: String,

        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
    },

    /// Synthesize a seeded model and write it as a container file.
    Synth,
}

/// Command failure carrying its exit class.
#[derive(Debug)]
pub(crate) enum CliError {
    /// Bad inputs: config, flags, policy, ranges, calibration. Exit 1.
    Validation(String),
    /// Execution or file-format failure. Exit 2.
    Runtime(String),
    /// Runtime and reference disagree. Exit 3.
    Comparison(String),
}

pub(crate) type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Comparison(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::Comparison(m) => m,
        }
    }
}

impl From<skipformer_core::Error> for CliError {
    fn from(err: skipformer_core::Error) -> Self {
        use skipformer_core::Error as E;
        match err {
            E::Policy(_) | E::Config(_) | E::Range(_) | E::Calibration(_) => {
                CliError::Validation(err.to_string())
            }
            _ => CliError::Runtime(err.to_string()),
        }
    }
}

/// Wraps a core error with the config field it concerns, keeping its exit
/// class.
pub(crate) fn in_field(field: &str, err: skipformer_core::Error) -> CliError {
    match CliError::from(err) {
        CliError::Validation(m) => CliError::Validation(format!("{field}: {m}")),
        CliError::Runtime(m) => CliError::Runtime(format!("{field}: {m}")),
        CliError::Comparison(m) => CliError::Comparison(format!("{field}: {m}")),
    }
}

fn main() {
    let filter = std::env::var("SKIPFORMER_LOG").unwrap_or_else(|_| "error".to_string());
    env_logger::Builder::new().parse_filters(&filter).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version go to stdout with exit 0; anything else is a
            // validation failure under the exit-code contract.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            process::exit(code);
        }
    };
    if let Err(err) = commands::dispatch(cli) {
        eprintln!("error: {}", err.message());
        process::exit(err.code());
    }
}
