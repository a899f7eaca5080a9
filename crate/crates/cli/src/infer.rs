use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use consinstancy::io::load_gray_png;
use consinstancy::model::ModelState;
use consinstancy::panoptic::DEFAULT_TAU;
use consinstancy::synthdata::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::predictions::{labeled_stems, stem_of, unique, write_item, MapSource, PredictionIndex};
use crate::{load_config, set_if, write_effective};

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Predict the labelled items of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Individual 8-bit grayscale PNGs.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub tau: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: PathBuf::from("runs/train/final.ckpt"),
            manifest: None,
            images: Vec::new(),
            out_dir: PathBuf::from("runs/predictions"),
            tau: DEFAULT_TAU,
        }
    }
}

impl InferConfig {
    pub fn resolve(a: InferArgs) -> Result<Self> {
        let mut c: InferConfig = load_config(a.config.as_deref())?;
        set_if!(c.checkpoint, a.checkpoint);
        if a.manifest.is_some() {
            c.manifest = a.manifest;
        }
        if !a.images.is_empty() {
            c.images = a.images;
        }
        set_if!(c.out_dir, a.out);
        set_if!(c.tau, a.tau);
        Ok(c)
    }
}

fn inputs(c: &InferConfig) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if let Some(m) = &c.manifest {
        let manifest = DatasetManifest::load(m)?;
        let stems = labeled_stems(&manifest)?;
        for (stem, item) in stems.into_iter().zip(&manifest.labeled_items) {
            out.push((stem, manifest.resolve(&item.image)));
        }
    }
    for p in &c.images {
        out.push((stem_of(p)?, p.clone()));
    }
    if out.is_empty() {
        bail!("nothing to predict; pass --manifest or --images");
    }
    unique(&out.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>())?;
    Ok(out)
}

pub fn run(c: &InferConfig) -> Result<()> {
    let state = load_checkpoint(&c.checkpoint)?;
    let items = inputs(c)?;
    write_effective(&c.out_dir, c)?;
    let network = state.network()?;
    let config = &state.config;
    for (stem, path) in &items {
        let image = load_gray_png(path)?;
        let pred = network
            .predict(&state.params, &image)
            .with_context(|| format!("predicting {}", path.display()))?;
        let instance = pred.instance.as_ref().map(|(t, d)| (t, d));
        write_item(&c.out_dir, stem, &pred.semantic, instance, config.n_thing_classes, c.tau)?;
    }
    PredictionIndex {
        source: MapSource::Model,
        variant: Some(config.variant),
        n_classes: config.n_classes,
        n_thing_classes: config.n_thing_classes,
        instance_maps: config.variant.has_instance_decoder(),
        tau: c.tau,
        items: items.into_iter().map(|(s, _)| s).collect(),
    }
    .save(&c.out_dir)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    ModelState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}
