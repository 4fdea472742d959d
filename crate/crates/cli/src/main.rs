//! `purify`: poisoned-sample detection on per-class representation files.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use purify_core::flatten::Normalization;
use purify_core::repr_store::MatrixFormat;

use crate::config::RunConfig;

/// Bad invocation: missing flags, unreadable inputs, out-of-range options.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Returned when detection flagged a class and `--fail-on-detect` is set.
#[derive(Debug)]
pub struct Detected;

impl fmt::Display for Detected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("infected classes detected")
    }
}

impl std::error::Error for Detected {}

#[derive(Parser)]
#[command(name = "purify", version, about = "Detect and remove poisoned samples from class representation sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: weights, detection and quarantine.
    Analyze(RunArgs),
    /// Per-class weight vectors only.
    Weights(RunArgs),
    /// Screen classes from precomputed weights.
    Detect(RunArgs),
    /// Quarantine flagged classes from precomputed weights and a report.
    Mitigate(RunArgs),
    /// Flattening metric of a representation file (per class with --labels).
    Flatten(RunArgs),
    /// Write a synthetic dataset with ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Training representations (one row per sample).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Label file: `sample_index,class_id[,sample_id]`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Clean held-out representations used for centering.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Weights directory written by `weights`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Detection report written by `detect`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output directory (output file for `flatten`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cumulative variance share that fixes the latent subspace rank.
    #[arg(long)]
    cpv: Option<f64>,
    /// Anomaly-index threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Neighbors per point for the flattening graph.
    #[arg(long)]
    knn: Option<usize>,
    /// Distance-profile normalization for `flatten`.
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<Normalization>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Matrix file format for inputs and outputs.
    #[arg(long, value_parser = parse_format)]
    format: Option<MatrixFormat>,
    /// JSON file with any of the above settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit with status 3 when a class is flagged.
    #[arg(long)]
    fail_on_detect: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON generator configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<MatrixFormat>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ambient dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Rank of each class subspace.
    #[arg(long)]
    rank: Option<usize>,
    /// Genuine samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Poisoned samples added to the infected class.
    #[arg(long)]
    poison: Option<usize>,
    /// Index of the infected class.
    #[arg(long)]
    infected: Option<usize>,
    /// Generate clean classes only.
    #[arg(long, conflicts_with_all = ["infected", "poison"])]
    no_infected: bool,
    /// Noise standard deviation per coordinate.
    #[arg(long)]
    noise: Option<f64>,
    /// Angle between genuine and poison subspaces, in degrees.
    #[arg(long)]
    angle: Option<f64>,
    /// Poison coefficient variance relative to genuine.
    #[arg(long)]
    variance_ratio: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_format(s: &str) -> Result<MatrixFormat, String> {
    s.parse().map_err(|e: purify_core::Error| e.to_string())
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "standardized" => Ok(Normalization::Standardized),
        "rms" => Ok(Normalization::Rms),
        other => Err(format!("unknown normalization `{other}` (expected standardized or rms)")),
    }
}

impl RunArgs {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    cfg.$field = v;
                }
            };
            ($flag:ident => some $field:ident) => {
                if self.$flag.is_some() {
                    cfg.$field = self.$flag;
                }
            };
        }
        set!(train => some train);
        set!(labels => some labels);
        set!(clean => some clean);
        set!(weights => some weights);
        set!(report => some report);
        set!(out => some out);
        set!(threads => some threads);
        set!(cpv => cpv_threshold);
        set!(tau => tau);
        set!(knn => k_nn);
        set!(normalization => normalization);
        set!(seed => seed);
        set!(format => format);
        cfg.fail_on_detect |= self.fail_on_detect;
        if !(cfg.cpv_threshold > 0.0 && cfg.cpv_threshold <= 1.0) {
            return Err(UsageError(format!("--cpv must lie in (0, 1], got {}", cfg.cpv_threshold)).into());
        }
        if !(cfg.tau >= 0.0 && cfg.tau.is_finite()) {
            return Err(UsageError(format!("--tau must be finite and non-negative, got {}", cfg.tau)).into());
        }
        if cfg.k_nn == 0 {
            return Err(UsageError("--knn must be at least 1".into()).into());
        }
        if cfg.threads == Some(0) {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        Ok(cfg)
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Analyze(a) => {
            let cfg = a.resolve()?;
            with_threads(cfg.threads, || commands::analyze(&cfg))?
        }
        Command::Weights(a) => {
            let cfg = a.resolve()?;
            with_threads(cfg.threads, || commands::weights(&cfg))?
        }
        Command::Detect(a) => {
            let cfg = a.resolve()?;
            with_threads(cfg.threads, || commands::detect(&cfg))?
        }
        Command::Mitigate(a) => {
            let cfg = a.resolve()?;
            with_threads(cfg.threads, || commands::mitigate(&cfg))?
        }
        Command::Flatten(a) => {
            let cfg = a.resolve()?;
            with_threads(cfg.threads, || commands::flatten(&cfg))?
        }
        Command::Synth(s) => {
            let threads = s.threads;
            with_threads(threads, || commands::synth(s))?
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Detected>() => {
            eprintln!("purify: {e}");
            ExitCode::from(3)
        }
        Err(e) if e.is::<UsageError>() => {
            eprintln!("purify: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("purify: {e:#}");
            ExitCode::from(1)
        }
    }
}
