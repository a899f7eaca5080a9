//! On-disk layout shared by `make-reps`, `infer` and `evaluate`.
//!
//! A predictions directory holds `predictions.json` and, per item stem,
//! `<stem>_semantic.citf` plus (for instance-aware sources)
//! `<stem>_theta.citf`, `<stem>_plus.citf`, `<stem>_minus.citf`, and the
//! panoptic maps `<stem>_class.png`, `<stem>_ids.png`, `<stem>.json`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use consinstancy::io::{read_float_map, read_json, write_float_map, write_json};
use consinstancy::model::Variant;
use consinstancy::panoptic::{connected_components_panoptic, panoptic_segment, InstanceSource, PanopticMap};
use consinstancy::representations::{DistanceMapPair, OrientationMap, SemanticMap};
use consinstancy::synthdata::DatasetManifest;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "predictions.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Reference,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub source: MapSource,
    pub variant: Option<Variant>,
    pub n_classes: usize,
    pub n_thing_classes: usize,
    /// Whether distance and orientation maps were written.
    pub instance_maps: bool,
    pub tau: f64,
    pub items: Vec<String>,
}

impl PredictionIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        if !path.is_file() {
            bail!("{} is not a predictions directory (missing {INDEX_FILE})", dir.display());
        }
        Ok(read_json(&path)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Ok(write_json(&dir.join(INDEX_FILE), self)?)
    }
}

/// Item stem of an image path (its file name without extension).
pub fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .with_context(|| format!("{} has no usable file name", path.display()))
}

/// Stems of the labelled items of a manifest, checked for uniqueness.
pub fn labeled_stems(manifest: &DatasetManifest) -> Result<Vec<String>> {
    let stems: Vec<String> = manifest.labeled_items.iter().map(|i| stem_of(&i.image)).collect::<Result<_>>()?;
    unique(&stems)?;
    Ok(stems)
}

pub fn unique(stems: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in stems {
        if !seen.insert(s) {
            bail!("two inputs share the item name {s:?}");
        }
    }
    Ok(())
}

fn to_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|v| v as f32)
}

fn map_path(dir: &Path, stem: &str, kind: &str) -> PathBuf {
    dir.join(format!("{stem}_{kind}.citf"))
}

/// Writes one item's maps and its panoptic segmentation at `tau`. Maps are
/// stored as f32 and the segmentation is computed from the stored values, so
/// re-running post-processing from the files reproduces it.
pub fn write_item(
    dir: &Path,
    stem: &str,
    semantic: &SemanticMap,
    instance: Option<(&OrientationMap, &DistanceMapPair)>,
    n_thing: usize,
    tau: f64,
) -> Result<PanopticMap> {
    write_float_map(&map_path(dir, stem, "semantic"), &to_f32(&semantic.scores))?;
    if let Some((theta, d)) = instance {
        write_float_map(&map_path(dir, stem, "theta"), &to_f32(&theta.theta))?;
        write_float_map(&map_path(dir, stem, "plus"), &to_f32(&d.plus))?;
        write_float_map(&map_path(dir, stem, "minus"), &to_f32(&d.minus))?;
    }
    let (panoptic, source, tau) = segment_item(dir, stem, instance.is_some(), n_thing, tau)?;
    panoptic.save(dir, stem, source, tau)?;
    Ok(panoptic)
}

/// Panoptic segmentation of a stored item at `tau`, falling back to
/// connected components when no distance map was stored.
pub fn segment_item(
    dir: &Path,
    stem: &str,
    instance_maps: bool,
    n_thing: usize,
    tau: f64,
) -> Result<(PanopticMap, InstanceSource, Option<f64>)> {
    let semantic = SemanticMap {
        scores: read_float_map(&map_path(dir, stem, "semantic"))?.mapv(f64::from),
    };
    if instance_maps {
        let minus = read_float_map(&map_path(dir, stem, "minus"))?.mapv(f64::from);
        Ok((panoptic_segment(&semantic, &minus, tau)?, InstanceSource::DistanceMap, Some(tau)))
    } else {
        Ok((connected_components_panoptic(&semantic, n_thing)?, InstanceSource::ConnectedComponents, None))
    }
}

/// Stems listed by `manifest` with no semantic map under `dir`.
pub fn missing_items(dir: &Path, index: Option<&PredictionIndex>, stems: &[String]) -> Vec<String> {
    let listed: BTreeSet<&str> = index.map(|i| i.items.iter().map(String::as_str).collect()).unwrap_or_default();
    stems
        .iter()
        .filter(|s| !listed.contains(s.as_str()) || !map_path(dir, s, "semantic").is_file())
        .cloned()
        .collect()
}
