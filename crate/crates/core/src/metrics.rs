//! Semantic (confusion-matrix) and instance/panoptic metrics.
//!
//! Everything is micro-averaged: pixels and instances of all images are pooled
//! before rates are formed. Per-image results are kept as raw counts so they
//! merge associatively.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::PanopticMap;
use crate::representations::{thing_semantic_class, InstanceLabelMap};

pub const DEFAULT_IOU_MIN: f64 = 0.5;

/// `num / den`, or 0 when `den` is 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// Row = reference class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn add(&mut self, pred: &Array2<u16>, reference: &Array2<u16>) -> Result<()> {
        if pred.dim() != reference.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and reference {:?} differ",
                pred.dim(),
                reference.dim()
            )));
        }
        let n = self.n_classes();
        for (&p, &r) in pred.iter().zip(reference.iter()) {
            let (p, r) = (usize::from(p), usize::from(r));
            if p >= n || r >= n {
                return Err(Error::shape(format!("class index {} outside {n} classes", p.max(r))));
            }
            self.counts[[r, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn metrics(&self) -> Result<SemanticMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Precondition("no pixels to evaluate".into()));
        }
        let n = self.n_classes();
        let mut per_class = Vec::with_capacity(n);
        for c in 0..n {
            let tp = self.counts[[c, c]] as f64;
            let ref_c = self.counts.row(c).sum() as f64;
            let pred_c = self.counts.column(c).sum() as f64;
            let recall = ratio(tp, ref_c);
            let precision = ratio(tp, pred_c);
            per_class.push(ClassMetrics {
                recall,
                precision,
                f1: f1(precision, recall),
            });
        }
        let correct: u64 = (0..n).map(|c| self.counts[[c, c]]).sum();
        let mf1 = per_class.iter().map(|m| m.f1).sum::<f64>() / n as f64;
        Ok(SemanticMetrics {
            per_class,
            oa: correct as f64 / total as f64,
            mf1,
            n_pixels: total,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub oa: f64,
    pub mf1: f64,
    pub n_pixels: u64,
}

/// Per-class R/P/F1, OA and MF1 over all image pairs jointly.
pub fn semantic_metrics(pairs: &[(&Array2<u16>, &Array2<u16>)], n_classes: usize) -> Result<SemanticMetrics> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no images to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (pred, reference) in pairs {
        cm.add(pred, reference)?;
    }
    cm.metrics()
}

/// Semantic label map of the reference: thing instances to their thing class,
/// everything else to class 0.
pub fn reference_classes(labels: &InstanceLabelMap, n_classes: usize) -> Array2<u16> {
    let n_thing = labels.n_thing_classes();
    labels.ids().mapv(|id| match labels.class_of(id) {
        Some(t) if id != 0 => thing_semantic_class(n_classes, n_thing, t) as u16,
        _ => 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: u32,
    pub reference: u32,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub true_positives: Vec<MatchedPair>,
    pub false_positives: Vec<u32>,
    pub false_negatives: Vec<u32>,
}

/// One-to-one matching of predicted and reference segments of the same thing
/// class. Candidate pairs with IoU ≥ `iou_min` are taken greedily by
/// descending IoU (ties by ids), which is exact for `iou_min > 0.5`.
pub fn match_instances(
    pred: &PanopticMap,
    reference: &InstanceLabelMap,
    n_classes: usize,
    iou_min: f64,
) -> Result<Matching> {
    if pred.dim() != reference.ids().dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and reference {:?} differ",
            pred.dim(),
            reference.ids().dim()
        )));
    }
    let n_thing = reference.n_thing_classes();
    let ref_class = |id: u32| reference.class_of(id).map(|t| thing_semantic_class(n_classes, n_thing, t) as u16);

    let mut pred_area: BTreeMap<u32, (u64, u16)> = BTreeMap::new();
    let mut ref_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for ((&pid, &pc), &rid) in pred.id_of_pixel.iter().zip(pred.class_of_pixel.iter()).zip(reference.ids().iter()) {
        if pid != 0 {
            pred_area.entry(pid).or_insert((0, pc)).0 += 1;
        }
        if rid != 0 {
            *ref_area.entry(rid).or_default() += 1;
        }
        if pid != 0 && rid != 0 {
            *overlap.entry((pid, rid)).or_default() += 1;
        }
    }

    let mut candidates = Vec::new();
    for (&(pid, rid), &inter) in &overlap {
        let (pa, pc) = pred_area[&pid];
        if ref_class(rid) != Some(pc) {
            continue;
        }
        let iou = inter as f64 / (pa + ref_area[&rid] - inter) as f64;
        if iou >= iou_min {
            candidates.push(MatchedPair {
                pred: pid,
                reference: rid,
                iou,
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.pred.cmp(&b.pred))
            .then(a.reference.cmp(&b.reference))
    });

    let mut used_pred = std::collections::BTreeSet::new();
    let mut used_ref = std::collections::BTreeSet::new();
    let mut out = Matching::default();
    for c in candidates {
        if used_pred.contains(&c.pred) || used_ref.contains(&c.reference) {
            continue;
        }
        used_pred.insert(c.pred);
        used_ref.insert(c.reference);
        out.true_positives.push(c);
    }
    out.true_positives.sort_by_key(|m| (m.pred, m.reference));
    out.false_positives = pred_area.keys().copied().filter(|id| !used_pred.contains(id)).collect();
    out.false_negatives = ref_area.keys().copied().filter(|id| !used_ref.contains(id)).collect();
    Ok(out)
}

/// Pooled instance counts; merges associatively across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl InstanceCounts {
    pub fn from_matching(m: &Matching) -> Self {
        InstanceCounts {
            tp: m.true_positives.len() as u64,
            fp: m.false_positives.len() as u64,
            fn_: m.false_negatives.len() as u64,
            iou_sum: m.true_positives.iter().map(|p| p.iou).sum(),
        }
    }

    pub fn merge(&mut self, other: &InstanceCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    fn denominator(&self, tp_weight: f64) -> f64 {
        tp_weight * self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64
    }
}

/// A metric value and whether its denominator was zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub undefined: bool,
}

impl Flagged {
    fn of(num: f64, den: f64) -> Self {
        Flagged {
            value: ratio(num, den),
            undefined: den == 0.0,
        }
    }
}

/// Σ IoU over matches / (|TP| + ½|FP| + ½|FN|).
pub fn panoptic_quality(counts: &InstanceCounts) -> Flagged {
    Flagged::of(counts.iou_sum, counts.denominator(1.0))
}

/// 2|TP| / (2|TP| + |FP| + |FN|).
pub fn instance_f1(counts: &InstanceCounts) -> Flagged {
    Flagged::of(counts.tp as f64, counts.denominator(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub oa: f64,
    pub mf1_seg: f64,
    pub f1_inst: f64,
    pub f1_inst_undefined: bool,
    pub pq: f64,
    pub pq_undefined: bool,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n_images: usize,
    pub n_pixels: u64,
    pub iou_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

/// Accumulates per-image results into a [`MetricsReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    n_classes: usize,
    iou_min: f64,
    confusion: ConfusionMatrix,
    instances: InstanceCounts,
    n_images: usize,
}

impl Evaluator {
    pub fn new(n_classes: usize, iou_min: f64) -> Self {
        Evaluator {
            n_classes,
            iou_min,
            confusion: ConfusionMatrix::new(n_classes),
            instances: InstanceCounts::default(),
            n_images: 0,
        }
    }

    pub fn add(&mut self, pred: &PanopticMap, reference: &InstanceLabelMap) -> Result<Matching> {
        self.confusion.add(&pred.class_of_pixel, &reference_classes(reference, self.n_classes))?;
        let m = match_instances(pred, reference, self.n_classes, self.iou_min)?;
        self.instances.merge(&InstanceCounts::from_matching(&m));
        self.n_images += 1;
        Ok(m)
    }

    pub fn merge(&mut self, other: &Evaluator) {
        self.confusion.merge(&other.confusion);
        self.instances.merge(&other.instances);
        self.n_images += other.n_images;
    }

    pub fn report(&self, tau: Option<f64>) -> Result<MetricsReport> {
        if self.n_images == 0 {
            return Err(Error::Precondition("no images to evaluate".into()));
        }
        let sem = self.confusion.metrics()?;
        let pq = panoptic_quality(&self.instances);
        let f1 = instance_f1(&self.instances);
        Ok(MetricsReport {
            per_class: sem.per_class,
            oa: sem.oa,
            mf1_seg: sem.mf1,
            f1_inst: f1.value,
            f1_inst_undefined: f1.undefined,
            pq: pq.value,
            pq_undefined: pq.undefined,
            tp: self.instances.tp,
            fp: self.instances.fp,
            fn_: self.instances.fn_,
            n_images: self.n_images,
            n_pixels: sem.n_pixels,
            iou_min: self.iou_min,
            tau,
        })
    }
}

/// Aligned text table: class-wise R/P/F1, then OA, MF1, PQ and F1_inst.
pub fn format_report(report: &MetricsReport) -> String {
    let mut s = String::from("class  recall  precision  f1\n");
    for (c, m) in report.per_class.iter().enumerate() {
        s.push_str(&format!("{c:<5}  {:>6.4}  {:>9.4}  {:.4}\n", m.recall, m.precision, m.f1));
    }
    s.push_str(&format!(
        "OA {:.4}  MF1 {:.4}  PQ {:.4}  F1_inst {:.4}  (TP {} FP {} FN {}, {} images)\n",
        report.oa, report.mf1_seg, report.pq, report.f1_inst, report.tp, report.fp, report.fn_, report.n_images
    ));
    s
}
