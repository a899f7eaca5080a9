use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use consinstancy::metrics::DEFAULT_IOU_MIN;
use consinstancy::model::Variant;
use consinstancy::panoptic::DEFAULT_TAU;
use consinstancy::synthdata::DatasetManifest;
use consinstancy::training::{TrainConfig, FINAL_CHECKPOINT};
use serde::{Deserialize, Serialize};

use crate::evaluate::EvaluateConfig;
use crate::generate::{TEST_MANIFEST, TRAIN_MANIFEST};
use crate::infer::InferConfig;
use crate::train::TrainRunConfig;
use crate::{data_root, load_config, set_if, write_effective};

pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Vec<u64>,
    /// Comma-separated subset of Seg, Inst, ConsInst.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub variants: Vec<Variant>,
    /// Optimizer steps per run; each variant gets the epochs that cover it.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iou_min: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Step budget shared by all variants; `None` uses `train.max_epochs`.
    pub steps: Option<usize>,
    pub tau: f64,
    pub iou_min: f64,
    /// Template for every run; variant, seed and output path are set per cell.
    pub train: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            manifest: data_root().join(TRAIN_MANIFEST),
            test_manifest: data_root().join(TEST_MANIFEST),
            out_dir: PathBuf::from("runs/ablation"),
            seeds: vec![1, 2, 3],
            variants: Variant::ALL.to_vec(),
            steps: None,
            tau: DEFAULT_TAU,
            iou_min: DEFAULT_IOU_MIN,
            train: TrainConfig::default(),
        }
    }
}

impl AblateConfig {
    pub fn resolve(a: AblateArgs) -> Result<Self> {
        let mut c: AblateConfig = load_config(a.config.as_deref())?;
        set_if!(c.manifest, a.manifest);
        set_if!(c.test_manifest, a.test_manifest);
        set_if!(c.out_dir, a.out);
        if !a.seeds.is_empty() {
            c.seeds = a.seeds;
        }
        if !a.variants.is_empty() {
            c.variants = a.variants;
        }
        if a.steps.is_some() {
            c.steps = a.steps;
        }
        set_if!(c.train.max_epochs, a.epochs);
        set_if!(c.tau, a.tau);
        set_if!(c.iou_min, a.iou_min);
        Ok(c)
    }

    /// Training config of one cell.
    pub fn cell_config(&self, variant: Variant, seed: u64, n_labeled: usize, n_unlabeled: usize) -> TrainConfig {
        let mut t = TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        };
        if let Some(steps) = self.steps {
            t.max_epochs = steps.div_ceil(t.steps_per_epoch(n_labeled, n_unlabeled).max(1));
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub oa: f64,
    pub mf1: f64,
    pub pq: f64,
    pub f1_inst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub variant: Variant,
    pub epochs: usize,
    pub steps: usize,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

/// Mean, median and sample standard deviation (n − 1) over successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: None,
                median: None,
                std: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Stat {
            mean: Some(mean),
            median: Some(median),
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub runs: usize,
    pub failed: usize,
    pub oa: Stat,
    pub mf1: Stat,
    pub pq: Stat,
    pub f1_inst: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<Cell>,
    pub summary: BTreeMap<String, VariantSummary>,
}

impl AblationReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn ensure_complete(&self) -> Result<()> {
        match self.failures() {
            0 => Ok(()),
            n => bail!("{n} of {} ablation cells failed", self.cells.len()),
        }
    }

    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.get(&v.to_string())
    }
}

fn cell_dir(out: &Path, seed: u64, variant: Variant) -> PathBuf {
    out.join(format!("seed_{seed}")).join(variant.to_string())
}

fn run_cell(c: &AblateConfig, train: TrainConfig) -> Result<CellMetrics> {
    let dir = cell_dir(&c.out_dir, train.seed, train.variant);
    let run = TrainRunConfig {
        manifest: c.manifest.clone(),
        out_dir: dir.join("train"),
        train,
        quiet: true,
    };
    crate::train::run(&run)?;
    let infer = InferConfig {
        checkpoint: run.out_dir.join(FINAL_CHECKPOINT),
        manifest: Some(c.test_manifest.clone()),
        images: Vec::new(),
        out_dir: dir.join("predictions"),
        tau: c.tau,
    };
    crate::infer::run(&infer)?;
    let eval = EvaluateConfig {
        predictions: infer.out_dir.clone(),
        manifest: c.test_manifest.clone(),
        taus: vec![c.tau],
        iou_min: c.iou_min,
        out_dir: Some(dir.join("eval")),
    };
    let r = &crate::evaluate::run(&eval)?[0];
    Ok(CellMetrics {
        oa: r.oa,
        mf1: r.mf1_seg,
        pq: r.pq,
        f1_inst: r.f1_inst,
    })
}

/// Trains and evaluates every (seed, variant) cell. A failing cell is
/// recorded and the remaining cells still run.
pub fn run(c: &AblateConfig) -> Result<AblationReport> {
    if c.seeds.is_empty() || c.variants.is_empty() {
        bail!("ablation needs at least one seed and one variant");
    }
    let manifest = DatasetManifest::load(&c.manifest)?;
    let (n_l, n_u) = (manifest.labeled_items.len(), manifest.unlabeled_items.len());
    write_effective(&c.out_dir, c)?;
    let mut cells = Vec::new();
    for &seed in &c.seeds {
        for &variant in &c.variants {
            let train = c.cell_config(variant, seed, n_l, n_u);
            let epochs = train.max_epochs;
            let steps = epochs * train.steps_per_epoch(n_l, n_u);
            let outcome = run_cell(c, train);
            match &outcome {
                Ok(m) => eprintln!(
                    "seed {seed} {variant}: OA {:.4} MF1 {:.4} PQ {:.4} F1_inst {:.4}",
                    m.oa, m.mf1, m.pq, m.f1_inst
                ),
                Err(e) => eprintln!("seed {seed} {variant}: failed: {e:#}"),
            }
            cells.push(Cell {
                seed,
                variant,
                epochs,
                steps,
                error: outcome.as_ref().err().map(|e| format!("{e:#}")),
                metrics: outcome.ok(),
            });
        }
    }
    let mut summary = BTreeMap::new();
    for &variant in &c.variants {
        let ok: Vec<&CellMetrics> = cells
            .iter()
            .filter(|x| x.variant == variant)
            .filter_map(|x| x.metrics.as_ref())
            .collect();
        let stat = |f: fn(&CellMetrics) -> f64| Stat::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
        summary.insert(
            variant.to_string(),
            VariantSummary {
                runs: ok.len(),
                failed: c.seeds.len() - ok.len(),
                oa: stat(|m| m.oa),
                mf1: stat(|m| m.mf1),
                pq: stat(|m| m.pq),
                f1_inst: stat(|m| m.f1_inst),
            },
        );
    }
    let report = AblationReport { cells, summary };
    consinstancy::io::write_json(&c.out_dir.join(ABLATION_FILE), &report)?;
    let table = format_table(&report, &c.variants);
    std::fs::write(c.out_dir.join(ABLATION_TABLE), &table)?;
    Ok(report)
}

fn cell_text(s: &Stat) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        (Some(m), None) => format!("{m:.4} ± n/a"),
        _ => "n/a".into(),
    }
}

/// Per-variant mean ± std, then one line per cell.
pub fn format_table(report: &AblationReport, variants: &[Variant]) -> String {
    let mut s = format!(
        "{:<9} {:>4}  {:<16} {:<16} {:<16} {:<16}\n",
        "variant", "runs", "OA", "MF1", "PQ", "F1_inst"
    );
    for v in variants {
        if let Some(x) = report.summary_of(*v) {
            s.push_str(&format!(
                "{:<9} {:>4}  {:<16} {:<16} {:<16} {:<16}\n",
                v.to_string(),
                x.runs,
                cell_text(&x.oa),
                cell_text(&x.mf1),
                cell_text(&x.pq),
                cell_text(&x.f1_inst)
            ));
        }
    }
    s.push('\n');
    for c in &report.cells {
        match (&c.metrics, &c.error) {
            (Some(m), _) => s.push_str(&format!(
                "seed {:<4} {:<9} OA {:.4}  MF1 {:.4}  PQ {:.4}  F1_inst {:.4}\n",
                c.seed,
                c.variant.to_string(),
                m.oa,
                m.mf1,
                m.pq,
                m.f1_inst
            )),
            (None, Some(e)) => s.push_str(&format!("seed {:<4} {:<9} failed: {e}\n", c.seed, c.variant.to_string())),
            (None, None) => {}
        }
    }
    s
}
