//! Panoptic post-processing: semantic map plus complementary distance map to
//! a per-pixel (class, instance id) partition.
//!
//! For each thing class the predicted class mask is split into an interior
//! (`δ⁻ < tau`) and a boundary band (`δ⁻ ≥ tau`). 4-connected interior
//! components receive fresh ids in raster order. The boundary band is then
//! filled by layer-synchronous breadth-first growth from all interiors at
//! once: in each layer, every unassigned band pixel with an assigned
//! 4-neighbour takes the smallest id among them. Band pixels no interior can
//! reach form their own instances, one per 4-connected blob.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::representations::{thing_semantic_class, InstanceLabelMap, SemanticMap};

pub const DEFAULT_TAU: f64 = 0.9;

/// Semantic class and instance id of every pixel; id 0 marks stuff.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub class_of_pixel: Array2<u16>,
    pub id_of_pixel: Array2<u32>,
}

/// How instance ids were derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    DistanceMap,
    ConnectedComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: InstanceSource,
    pub tau: Option<f64>,
    /// Instance ids per semantic class.
    pub ids_by_class: BTreeMap<u16, Vec<u32>>,
}

impl PanopticMap {
    pub fn dim(&self) -> (usize, usize) {
        self.id_of_pixel.dim()
    }

    pub fn ids_by_class(&self) -> BTreeMap<u16, Vec<u32>> {
        let mut by_id: BTreeMap<u32, u16> = BTreeMap::new();
        for (&id, &c) in self.id_of_pixel.iter().zip(self.class_of_pixel.iter()) {
            if id > 0 {
                by_id.insert(id, c);
            }
        }
        let mut out: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
        for (id, c) in by_id {
            out.entry(c).or_default().push(id);
        }
        out
    }

    pub fn instance_count(&self) -> usize {
        self.ids_by_class().values().map(Vec::len).sum()
    }

    /// The instance partition as a label map, thing classes renumbered from 0.
    pub fn to_label_map(&self, n_classes: usize, n_thing: usize) -> Result<InstanceLabelMap> {
        let first = (n_classes - n_thing) as u16;
        let mut classes = BTreeMap::new();
        for (c, ids) in self.ids_by_class() {
            if c < first {
                return Err(Error::Precondition(format!("stuff class {c} carries instance ids")));
            }
            for id in ids {
                classes.insert(id, usize::from(c - first));
            }
        }
        InstanceLabelMap::new(self.id_of_pixel.clone(), classes, n_thing)
    }

    /// Writes `<stem>_class.png`, `<stem>_ids.png` (16-bit) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, source: InstanceSource, tau: Option<f64>) -> Result<()> {
        io::save_u16_png(&dir.join(format!("{stem}_class.png")), &self.class_of_pixel.mapv(u32::from))?;
        io::save_u16_png(&dir.join(format!("{stem}_ids.png")), &self.id_of_pixel)?;
        let sidecar = Sidecar {
            source,
            tau,
            ids_by_class: self.ids_by_class(),
        };
        io::write_json(&dir.join(format!("{stem}.json")), &sidecar)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, Sidecar)> {
        let class = io::load_u16_png(&dir.join(format!("{stem}_class.png")))?;
        let ids = io::load_u16_png(&dir.join(format!("{stem}_ids.png")))?;
        let sidecar: Sidecar = io::read_json(&dir.join(format!("{stem}.json")))?;
        if class.dim() != ids.dim() {
            return Err(Error::format(dir.join(stem), "class and id maps differ in size"));
        }
        Ok((
            PanopticMap {
                class_of_pixel: class.mapv(|c| c as u16),
                id_of_pixel: ids,
            },
            sidecar,
        ))
    }
}

/// `δ⁻ ≥ tau` per thing channel.
pub fn extract_boundaries(delta_minus: &Array3<f64>, tau: f64) -> Array3<bool> {
    delta_minus.mapv(|v| v >= tau)
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then_some((ny as usize, nx as usize))
    })
}

/// Labels 4-connected components of `mask` with ids `next_id..` in raster
/// order of their first pixel; returns the next free id.
fn label_components(mask: &Array2<bool>, ids: &mut Array2<u32>, mut next_id: u32) -> u32 {
    let (h, w) = mask.dim();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || ids[[y, x]] != 0 {
                continue;
            }
            ids[[y, x]] = next_id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    if mask[[ny, nx]] && ids[[ny, nx]] == 0 {
                        ids[[ny, nx]] = next_id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            next_id += 1;
        }
    }
    next_id
}

/// Layer-synchronous growth of the ids in `ids` over the unassigned pixels of
/// `band`; each newly reached pixel takes the smallest id among its already
/// assigned 4-neighbours.
fn grow_into_band(band: &Array2<bool>, ids: &mut Array2<u32>) {
    let (h, w) = band.dim();
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if band[[y, x]] && ids[[y, x]] == 0 && neighbours(y, x, h, w).any(|(ny, nx)| ids[[ny, nx]] != 0) {
                frontier.push((y, x));
            }
        }
    }
    while !frontier.is_empty() {
        let layer: Vec<((usize, usize), u32)> = frontier
            .iter()
            .map(|&(y, x)| {
                let id = neighbours(y, x, h, w)
                    .map(|(ny, nx)| ids[[ny, nx]])
                    .filter(|&id| id != 0)
                    .min()
                    .expect("frontier pixels touch an assigned pixel");
                ((y, x), id)
            })
            .collect();
        for &((y, x), id) in &layer {
            ids[[y, x]] = id;
        }
        let mut next = Vec::new();
        for &((y, x), _) in &layer {
            for (ny, nx) in neighbours(y, x, h, w) {
                if band[[ny, nx]] && ids[[ny, nx]] == 0 {
                    next.push((ny, nx));
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
}

fn check_shapes(pred: &SemanticMap, delta_minus: &Array3<f64>) -> Result<(usize, usize, usize)> {
    let (h, w, n_classes) = pred.scores.dim();
    let (dh, dw, n_thing) = delta_minus.dim();
    if (dh, dw) != (h, w) || n_thing == 0 || n_thing >= n_classes {
        return Err(Error::shape(format!(
            "semantic map {:?} and distance map {:?} do not fit",
            pred.scores.dim(),
            delta_minus.dim()
        )));
    }
    Ok((h, w, n_classes))
}

/// Panoptic segmentation from a semantic map and the complementary distance
/// map `δ⁻` (`H × W × N_Th`). Thing classes are the last `N_Th` classes.
pub fn panoptic_segment(pred: &SemanticMap, delta_minus: &Array3<f64>, tau: f64) -> Result<PanopticMap> {
    let (h, w, n_classes) = check_shapes(pred, delta_minus)?;
    let n_thing = delta_minus.len_of(Axis(2));
    let class_of_pixel = pred.argmax();
    let mut ids = Array2::<u32>::zeros((h, w));
    let mut next_id = 1;
    for t in 0..n_thing {
        let sem = thing_semantic_class(n_classes, n_thing, t) as u16;
        let mask = class_of_pixel.mapv(|c| c == sem);
        let dm = delta_minus.index_axis(Axis(2), t);
        let mut band = Array2::from_elem((h, w), false);
        let mut interior = Array2::from_elem((h, w), false);
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                if dm[[y, x]] >= tau {
                    band[[y, x]] = true;
                } else {
                    interior[[y, x]] = true;
                }
            }
        }
        next_id = label_components(&interior, &mut ids, next_id);
        grow_into_band(&band, &mut ids);
        next_id = label_components(&band, &mut ids, next_id);
    }
    Ok(PanopticMap {
        class_of_pixel,
        id_of_pixel: ids,
    })
}

/// Instances as 4-connected components of each thing class mask, for outputs
/// without a distance map.
pub fn connected_components_panoptic(pred: &SemanticMap, n_thing: usize) -> Result<PanopticMap> {
    let (h, w, n_classes) = pred.scores.dim();
    if n_thing == 0 || n_thing >= n_classes {
        return Err(Error::shape(format!("{n_thing} thing classes of {n_classes}")));
    }
    let class_of_pixel = pred.argmax();
    let mut ids = Array2::<u32>::zeros((h, w));
    let mut next_id = 1;
    for t in 0..n_thing {
        let sem = thing_semantic_class(n_classes, n_thing, t) as u16;
        let mask = class_of_pixel.mapv(|c| c == sem);
        next_id = label_components(&mask, &mut ids, next_id);
    }
    Ok(PanopticMap {
        class_of_pixel,
        id_of_pixel: ids,
    })
}

/// Whether two id maps describe the same partition up to relabelling.
pub fn same_partition(a: &Array2<u32>, b: &Array2<u32>) -> bool {
    if a.dim() != b.dim() {
        return false;
    }
    let mut fwd = BTreeMap::new();
    let mut bwd = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
