use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use consinstancy::metrics::{format_report, Evaluator, MetricsReport, DEFAULT_IOU_MIN};
use consinstancy::panoptic::DEFAULT_TAU;
use consinstancy::synthdata::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::generate::TEST_MANIFEST;
use crate::predictions::{labeled_stems, missing_items, segment_item, PredictionIndex};
use crate::{data_root, load_config, set_if, write_effective};

pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `infer` or `make-reps`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Reference manifest [default: <data>/test.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// One or more boundary thresholds; each gets its own report.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub tau: Vec<f64>,
    #[arg(long)]
    pub iou_min: Option<f64>,
    /// Report directory [default: <predictions>/eval]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub taus: Vec<f64>,
    pub iou_min: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            predictions: PathBuf::from("runs/predictions"),
            manifest: data_root().join(TEST_MANIFEST),
            taus: vec![DEFAULT_TAU],
            iou_min: DEFAULT_IOU_MIN,
            out_dir: None,
        }
    }
}

impl EvaluateConfig {
    pub fn resolve(a: EvaluateArgs) -> Result<Self> {
        let mut c: EvaluateConfig = load_config(a.config.as_deref())?;
        set_if!(c.predictions, a.predictions);
        set_if!(c.manifest, a.manifest);
        if !a.tau.is_empty() {
            c.taus = a.tau;
        }
        set_if!(c.iou_min, a.iou_min);
        if a.out.is_some() {
            c.out_dir = a.out;
        }
        if c.out_dir.is_none() {
            c.out_dir = Some(c.predictions.join("eval"));
        }
        Ok(c)
    }

    fn report_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| self.predictions.join("eval"))
    }
}

/// One report per tau, written as a JSON array plus a text table.
pub fn run(c: &EvaluateConfig) -> Result<Vec<MetricsReport>> {
    if c.taus.is_empty() {
        bail!("at least one tau is required");
    }
    let manifest = DatasetManifest::load(&c.manifest)?;
    let stems = labeled_stems(&manifest)?;
    if stems.is_empty() {
        bail!("{} has no labelled items to evaluate", c.manifest.display());
    }
    let index = PredictionIndex::load(&c.predictions).ok();
    let missing = missing_items(&c.predictions, index.as_ref(), &stems);
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
        bail!(
            "{} of {} items have no prediction in {}: {}{}",
            missing.len(),
            stems.len(),
            c.predictions.display(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        );
    }
    let index = index.expect("missing_items reports every item without an index");
    let references: Vec<_> = (0..stems.len()).map(|i| manifest.load_labeled(i).map(|(_, l)| l)).collect::<Result<_, _>>()?;

    let out = c.report_dir();
    write_effective(&out, c)?;
    let mut reports = Vec::new();
    for &tau in &c.taus {
        let mut eval = Evaluator::new(index.n_classes, c.iou_min);
        for (stem, reference) in stems.iter().zip(&references) {
            let (pan, _, _) = segment_item(&c.predictions, stem, index.instance_maps, index.n_thing_classes, tau)?;
            eval.add(&pan, reference)?;
        }
        reports.push(eval.report(index.instance_maps.then_some(tau))?);
    }
    consinstancy::io::write_json(&out.join(METRICS_FILE), &reports)?;
    std::fs::write(out.join(METRICS_TABLE), format_reports(&c.taus, &reports))?;
    Ok(reports)
}

pub fn format_reports(taus: &[f64], reports: &[MetricsReport]) -> String {
    taus.iter()
        .zip(reports)
        .map(|(tau, r)| format!("tau {tau}\n{}\n", format_report(r)))
        .collect()
}
