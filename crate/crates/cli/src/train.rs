use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use consinstancy::model::{ModelState, Variant};
use consinstancy::synthdata::DatasetManifest;
use consinstancy::training::{train_with, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::generate::TRAIN_MANIFEST;
use crate::{data_root, load_config, set_if, write_effective};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest [default: <data>/train.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for checkpoints and history.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seg, Inst or ConsInst
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub labeled_per_batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of the consistency term.
    #[arg(long)]
    pub cons_weight: Option<f64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub quiet: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            manifest: data_root().join(TRAIN_MANIFEST),
            out_dir: PathBuf::from("runs/train"),
            train: TrainConfig::default(),
            quiet: false,
        }
    }
}

impl TrainRunConfig {
    pub fn resolve(a: TrainArgs) -> Result<Self> {
        let mut c: TrainRunConfig = load_config(a.config.as_deref())?;
        set_if!(c.manifest, a.manifest);
        set_if!(c.out_dir, a.out);
        let t = &mut c.train;
        set_if!(t.variant, a.variant);
        set_if!(t.max_epochs, a.epochs);
        set_if!(t.seed, a.seed);
        set_if!(t.lr, a.lr);
        set_if!(t.batch_size, a.batch_size);
        set_if!(t.labeled_per_batch, a.labeled_per_batch);
        set_if!(t.patience_epochs, a.patience);
        set_if!(t.loss_weights.cons, a.cons_weight);
        c.quiet |= a.quiet;
        c.train.checkpoint_dir = Some(c.out_dir.clone());
        Ok(c)
    }
}

pub fn run(c: &TrainRunConfig) -> Result<(ModelState, TrainHistory)> {
    let manifest = DatasetManifest::load(&c.manifest)?;
    let mut train = c.train.clone();
    train.checkpoint_dir = Some(c.out_dir.clone());
    write_effective(&c.out_dir, c)?;
    let quiet = c.quiet;
    let (state, history) = train_with(&train, &manifest, |r| {
        if !quiet {
            eprintln!("epoch {:>4}  lr {:.1e}  loss {:.5}", r.epoch, r.lr, r.loss.total);
        }
    })
    .with_context(|| format!("training {} on {}", train.variant, c.manifest.display()))?;
    if !quiet {
        let last = history.records.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
        println!(
            "trained {} for {} epochs (final loss {last:.5}); checkpoints in {}",
            train.variant,
            history.records.len(),
            c.out_dir.display()
        );
    }
    Ok((state, history))
}
