//! Command implementations behind the `consinstancy` binary.
//!
//! Every command resolves its configuration from an optional JSON file plus
//! flag overrides and writes the result as `effective_config.json` next to
//! its outputs; passing that file back through `--config` repeats the run.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub mod ablate;
pub mod evaluate;
pub mod generate;
pub mod infer;
pub mod predictions;
pub mod reps;
pub mod train;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const DATA_DIR_ENV: &str = "CONSINSTANCY_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "consinstancy", version, about = "Semi-supervised panoptic segmentation of particle scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train split and a disjoint test split.
    Generate(generate::GenerateArgs),
    /// Export reference representation maps for a manifest.
    MakeReps(reps::MakeRepsArgs),
    /// Train one model variant.
    Train(train::TrainArgs),
    /// Predict representation maps and panoptic segmentations.
    Infer(infer::InferArgs),
    /// Score predictions against a labelled manifest.
    Evaluate(evaluate::EvaluateArgs),
    /// Train and evaluate every variant for every seed.
    Ablate(ablate::AblateArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate::run(&generate::GenerateConfig::resolve(a)?).map(drop),
        Command::MakeReps(a) => reps::run(&reps::MakeRepsConfig::resolve(a)?),
        Command::Train(a) => train::run(&train::TrainRunConfig::resolve(a)?).map(drop),
        Command::Infer(a) => infer::run(&infer::InferConfig::resolve(a)?),
        Command::Evaluate(a) => {
            let c = evaluate::EvaluateConfig::resolve(a)?;
            let reports = evaluate::run(&c)?;
            print!("{}", evaluate::format_reports(&c.taus, &reports));
            Ok(())
        }
        Command::Ablate(a) => {
            let c = ablate::AblateConfig::resolve(a)?;
            let report = ablate::run(&c)?;
            print!("{}", ablate::format_table(&report, &c.variants));
            report.ensure_complete()
        }
    }
}

/// Invalid flag combinations; the binary exits with status 2 on these.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// `$CONSINSTANCY_DATA_DIR`, or `data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// The JSON config at `path`, or `T::default()`.
pub(crate) fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

pub(crate) fn write_effective<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    consinstancy::io::write_json(&dir.join(EFFECTIVE_CONFIG), config)?;
    Ok(())
}

/// Assigns `$value` to `$target` when the flag was given.
macro_rules! set_if {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}
pub(crate) use set_if;
