//! `geoadapt`: every pipeline stage, dataset tooling and reporting from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoadapt::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "geoadapt", version, about = "Unsupervised domain adaptation for aerial image segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Random seed for initialisation, shuffling, dropout and synthesis
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 = reference deterministic mode, 0 = all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory for datasets, checkpoints and run files
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// TOML config file; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base settings the config file and flags are applied to
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// On failure, also print a JSON error object to stderr
    #[arg(long, global = true)]
    pub error_json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-width networks and the long training schedules
    Default,
    /// Narrow networks and short schedules for the synthetic benchmark
    Benchmark,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target benchmark
    Synth(commands::SynthArgs),
    /// Cut large images (and color-coded labels) into a tiled dataset
    Tile(commands::TileArgs),
    /// Print the per-class pixel distribution of a dataset
    Stats(commands::StatsArgs),
    /// Step 1: train the source segmenter
    TrainSeg(commands::TrainSegArgs),
    /// Step 2: train the unpaired source<->target translation model
    TrainGan(commands::TrainGanArgs),
    /// Step 3: translate a labeled source dataset into the target style
    Translate(commands::TranslateArgs),
    /// Step 4: fine-tune a source segmenter on a translated dataset
    Finetune(commands::FinetuneArgs),
    /// Evaluate a segmenter checkpoint on a labeled dataset
    Eval(commands::EvalArgs),
    /// Side-by-side before/after table of two evaluation reports
    Report(commands::ReportArgs),
}

/// Failure of a command, tagged with its exit class.
#[derive(Debug)]
pub struct Failure {
    pub class: ErrorClass,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::Data,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::Numerical,
            message: message.into(),
        }
    }

    fn code(&self) -> u8 {
        match self.class {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }

    fn class_name(&self) -> &'static str {
        match self.class {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let error_json = cli.global.error_json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if error_json {
                let obj = serde_json::json!({
                    "error": { "class": f.class_name(), "code": f.code(), "message": f.message }
                });
                eprintln!("{obj}");
            }
            ExitCode::from(f.code())
        }
    }
}
