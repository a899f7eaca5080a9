use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use consinstancy::panoptic::DEFAULT_TAU;
use consinstancy::representations::References;
use consinstancy::synthdata::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::generate::TRAIN_MANIFEST;
use crate::predictions::{labeled_stems, write_item, MapSource, PredictionIndex};
use crate::{data_root, load_config, set_if, write_effective};

#[derive(Debug, Args)]
pub struct MakeRepsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest whose labelled items are exported [default: <data>/train.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Boundary threshold for the accompanying panoptic maps.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MakeRepsConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub n_classes: usize,
    pub tau: f64,
}

impl Default for MakeRepsConfig {
    fn default() -> Self {
        MakeRepsConfig {
            manifest: data_root().join(TRAIN_MANIFEST),
            out_dir: data_root().join("reps"),
            n_classes: 2,
            tau: DEFAULT_TAU,
        }
    }
}

impl MakeRepsConfig {
    pub fn resolve(a: MakeRepsArgs) -> Result<Self> {
        let mut c: MakeRepsConfig = load_config(a.config.as_deref())?;
        set_if!(c.manifest, a.manifest);
        set_if!(c.out_dir, a.out);
        set_if!(c.n_classes, a.n_classes);
        set_if!(c.tau, a.tau);
        Ok(c)
    }
}

/// Writes the reference maps of every labelled item in the predictions
/// layout, so `evaluate` can score them like model output.
pub fn run(c: &MakeRepsConfig) -> Result<()> {
    let manifest = DatasetManifest::load(&c.manifest)?;
    let stems = labeled_stems(&manifest)?;
    write_effective(&c.out_dir, c)?;
    let mut n_thing = 1;
    for (i, stem) in stems.iter().enumerate() {
        let (_, labels) = manifest.load_labeled(i)?;
        n_thing = labels.n_thing_classes();
        let r = References::from_labels(&labels, c.n_classes)?;
        write_item(&c.out_dir, stem, &r.semantic, Some((&r.orientation, &r.distances)), n_thing, c.tau)?;
    }
    PredictionIndex {
        source: MapSource::Reference,
        variant: None,
        n_classes: c.n_classes,
        n_thing_classes: n_thing,
        instance_maps: true,
        tau: c.tau,
        items: stems,
    }
    .save(&c.out_dir)?;
    println!("wrote reference maps for {} items to {}", manifest.labeled_items.len(), c.out_dir.display());
    Ok(())
}
