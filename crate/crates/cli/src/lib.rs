//! Command-line front end for the PAEDID pipeline.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use paedid::{Error, Result};

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "paedid", version, about = "Patch-autoencoder deep image decomposition")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Paedid,
    Residual,
    Noisy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic defect corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train the patch autoencoder on clean images.
    Train {
        /// Corpus directory (uses its train/ subdirectory when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode clean images into raw and aggregated memory banks.
    BuildBank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reduce the bank to this many rows by greedy coreset selection.
        #[arg(long)]
        coreset: Option<usize>,
    },
    /// Retrieve the deep image prior and decompose one image or a directory.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix for a single image, output directory otherwise.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "paedid")]
        mode: Mode,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Signed defect PTFs used as per-pixel scores for AUROC.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Exhaustive tuning-parameter search on an annotated corpus.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
}

/// Log level from `PAEDID_LOG`.
pub fn log_level(value: Option<&str>) -> Result<log::LevelFilter> {
    match value {
        None | Some("info") => Ok(log::LevelFilter::Info),
        Some("quiet") => Ok(log::LevelFilter::Off),
        Some("debug") => Ok(log::LevelFilter::Debug),
        Some(other) => Err(Error::InvalidArgument(format!(
            "PAEDID_LOG must be quiet, info or debug, got {other:?}"
        ))),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

/// Runs a parsed invocation, writing the JSON report (if any) to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        if !paedid::par::set_threads(n) {
            log::warn!("--jobs {n} ignored: thread pool unavailable or already configured");
        }
    }
    let cfg = load_config(cli)?;
    let report = match &cli.command {
        Command::GenData { out, n_train, n_test } => commands::gen_data(&cfg, out, *n_train, *n_test)?,
        Command::Train { data, out } => commands::train(&cfg, data, out)?,
        Command::BuildBank {
            model,
            data,
            out,
            coreset,
        } => commands::build_bank(&cfg, model, data, out, *coreset)?,
        Command::Decompose {
            model,
            bank,
            image,
            out,
            mode,
            threshold,
        } => commands::decompose(&cfg, model, bank, image, out, *mode, *threshold)?,
        Command::Eval { pred, truth, scores } => commands::eval(pred, truth, scores.as_deref())?,
        Command::Tune {
            data,
            grid,
            model,
            bank,
        } => commands::tune(&cfg, data, grid, model, bank)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
