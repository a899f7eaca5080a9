//! Reference instance representations derived from an instance label map.
//!
//! Every map here is computed from an [`InstanceLabelMap`] alone:
//!
//! * the one-hot [`SemanticMap`],
//! * the instance-aware distance transform `δ⁺` and its complement `δ⁻`
//!   ([`DistanceMapPair`]),
//! * the 3D [`OrientationMap`].
//!
//! The distance transform is instance aware: a pixel's distance is measured to
//! the nearest pixel that does not belong to its own instance, which includes
//! pixels of touching neighbours. Distances are normalized per instance so the
//! deepest pixel of every instance has `δ⁺ = 1`. By construction
//! `δ⁺ + δ⁻` equals the binary thing mask.
//!
//! All arrays are channel-last (`H × W × C`). The x axis runs along columns and
//! the y axis along rows.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// Per-pixel instance ids. Id 0 is stuff; every positive id is one instance of
/// a thing class.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLabelMap {
    ids: Array2<u32>,
    class_of_instance: BTreeMap<u32, usize>,
    n_thing_classes: usize,
}

impl InstanceLabelMap {
    /// Label map with a single thing class: every positive id maps to class 0.
    pub fn single_class(ids: Array2<u32>) -> Self {
        let class_of_instance = ids
            .iter()
            .filter(|&&id| id > 0)
            .map(|&id| (id, 0))
            .collect();
        InstanceLabelMap {
            ids,
            class_of_instance,
            n_thing_classes: 1,
        }
    }

    pub fn new(
        ids: Array2<u32>,
        class_of_instance: BTreeMap<u32, usize>,
        n_thing_classes: usize,
    ) -> Result<Self> {
        if n_thing_classes == 0 {
            return Err(Error::Precondition(
                "at least one thing class is required".into(),
            ));
        }
        let mut present = BTreeMap::new();
        for &id in ids.iter().filter(|&&id| id > 0) {
            let class = *class_of_instance
                .get(&id)
                .ok_or(Error::UnknownInstance(id))?;
            present.insert(id, class);
        }
        if let Some((&id, _)) = class_of_instance
            .iter()
            .find(|(id, _)| !present.contains_key(id))
        {
            return Err(Error::Precondition(format!(
                "instance id {id} is listed but owns no pixel"
            )));
        }
        if let Some((&id, &class)) = present.iter().find(|(_, &c)| c >= n_thing_classes) {
            return Err(Error::Precondition(format!(
                "instance {id} has thing class {class}, only {n_thing_classes} exist"
            )));
        }
        Ok(InstanceLabelMap {
            ids,
            class_of_instance: present,
            n_thing_classes,
        })
    }

    pub fn ids(&self) -> &Array2<u32> {
        &self.ids
    }

    pub fn height(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub fn n_thing_classes(&self) -> usize {
        self.n_thing_classes
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        self.class_of_instance.get(&id).copied()
    }

    pub fn class_of_instance(&self) -> &BTreeMap<u32, usize> {
        &self.class_of_instance
    }

    /// Present instance ids in ascending order.
    pub fn instance_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.class_of_instance.keys().copied()
    }

    /// Binary `H × W × N_Th` mask of thing pixels per thing class.
    pub fn thing_mask(&self) -> Array3<f64> {
        let mut mask = Array3::zeros((self.height(), self.width(), self.n_thing_classes));
        for ((y, x), &id) in self.ids.indexed_iter() {
            if let Some(class) = self.class_of(id) {
                mask[[y, x, class]] = 1.0;
            }
        }
        mask
    }

    /// Instance pixels grouped by id, in raster order.
    pub fn pixels_by_instance(&self) -> BTreeMap<u32, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for ((y, x), &id) in self.ids.indexed_iter() {
            if id > 0 {
                out.entry(id).or_default().push((y, x));
            }
        }
        out
    }
}

/// Per-pixel class scores, `H × W × N_C`. Reference maps are one-hot; network
/// predictions sum to one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub scores: Array3<f64>,
}

impl SemanticMap {
    pub fn n_classes(&self) -> usize {
        self.scores.len_of(Axis(2))
    }

    /// Per-pixel arg-max class. Ties go to the lower class index.
    pub fn argmax(&self) -> Array2<u16> {
        let (h, w, _) = self.scores.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let lane = self.scores.slice(ndarray::s![y, x, ..]);
            let mut best = 0;
            for (c, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = c;
                }
            }
            best as u16
        })
    }
}

/// Instance-aware distance map `δ⁺` and its complement `δ⁻`, each
/// `H × W × N_Th`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMapPair {
    pub plus: Array3<f64>,
    pub minus: Array3<f64>,
}

/// Per-pixel 3D unit vectors, `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationMap {
    pub theta: Array3<f64>,
}

/// All reference maps for one labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    pub semantic: SemanticMap,
    pub distances: DistanceMapPair,
    pub orientation: OrientationMap,
}

impl References {
    pub fn from_labels(labels: &InstanceLabelMap, n_classes: usize) -> Result<Self> {
        let semantic = semantic_from_labels(labels, n_classes)?;
        let plus = instance_sdt(labels);
        let minus = complement_sdt(&plus, &labels.thing_mask());
        Ok(References {
            semantic,
            distances: DistanceMapPair { plus, minus },
            orientation: orientation_from_labels(labels),
        })
    }
}

/// Semantic class index of thing class `thing` when the last `n_thing` of
/// `n_classes` classes are the thing classes.
pub fn thing_semantic_class(n_classes: usize, n_thing: usize, thing: usize) -> usize {
    n_classes - n_thing + thing
}

/// One-hot semantic map. Stuff pixels go to class 0, thing class `t` goes to
/// semantic class `n_classes - N_Th + t`.
pub fn semantic_from_labels(labels: &InstanceLabelMap, n_classes: usize) -> Result<SemanticMap> {
    let n_thing = labels.n_thing_classes();
    if n_thing >= n_classes {
        return Err(Error::Precondition(format!(
            "{n_thing} thing classes need more than {n_classes} semantic classes"
        )));
    }
    let mut scores = Array3::zeros((labels.height(), labels.width(), n_classes));
    for ((y, x), &id) in labels.ids().indexed_iter() {
        let class = if id == 0 {
            0
        } else {
            let thing = labels.class_of(id).ok_or(Error::UnknownInstance(id))?;
            thing_semantic_class(n_classes, n_thing, thing)
        };
        scores[[y, x, class]] = 1.0;
    }
    Ok(SemanticMap { scores })
}

// Stand-in for "no feature pixel"; large enough to never win a minimum and
// small enough to keep the envelope arithmetic finite.
const FAR: f64 = 1e20;

/// Exact 1D squared distance transform of a sampled function (lower envelope
/// of parabolas).
fn squared_dt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in 1..n {
        let qf = q as f64;
        loop {
            let k = v.len() - 1;
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z[k + 1] = s;
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance of every `inside` pixel to the nearest `!inside` pixel of
/// the grid. Values at or above `FAR / 2` mean no outside pixel exists.
fn squared_dt_2d(inside: &Array2<bool>) -> Array2<f64> {
    let (h, w) = inside.dim();
    let mut grid = inside.mapv(|i| if i { FAR } else { 0.0 });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[[y, x]];
        }
        squared_dt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[[y, x]] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row: Vec<f64> = grid.row(y).to_vec();
        squared_dt_1d(&row, &mut row_out, &mut v, &mut z);
        for x in 0..w {
            grid[[y, x]] = row_out[x];
        }
    }
    grid
}

/// Unnormalized instance-aware distance of each instance pixel to the nearest
/// real image pixel outside its instance; 0 on stuff.
///
/// An instance that fills the whole image has no outside pixel; its pixels get
/// distance 1 so that the normalized map is 1 and the gradient is zero.
pub fn instance_distance_field(labels: &InstanceLabelMap) -> Array2<f64> {
    let (h, w) = (labels.height(), labels.width());
    let ids = labels.ids();
    let mut out = Array2::zeros((h, w));
    for (id, pixels) in labels.pixels_by_instance() {
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for &(y, x) in &pixels {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        // The one-pixel ring around the bounding box holds a nearest outside
        // pixel for every instance pixel, so the box is all we need.
        let y0 = y0.saturating_sub(1);
        let x0 = x0.saturating_sub(1);
        let y1 = (y1 + 1).min(h - 1);
        let x1 = (x1 + 1).min(w - 1);
        let local = Array2::from_shape_fn((y1 - y0 + 1, x1 - x0 + 1), |(ly, lx)| {
            ids[[y0 + ly, x0 + lx]] == id
        });
        let sq = squared_dt_2d(&local);
        for &(y, x) in &pixels {
            let s = sq[[y - y0, x - x0]];
            out[[y, x]] = if s >= FAR / 2.0 { 1.0 } else { s.sqrt() };
        }
    }
    out
}

/// Normalized instance-aware distance transform `δ⁺`, `H × W × N_Th`.
///
/// Each instance pixel holds its distance to the nearest pixel outside its
/// instance divided by the largest such distance within the instance. Stuff
/// pixels are 0.
pub fn instance_sdt(labels: &InstanceLabelMap) -> Array3<f64> {
    let field = instance_distance_field(labels);
    let mut plus = Array3::zeros((labels.height(), labels.width(), labels.n_thing_classes()));
    for (id, pixels) in labels.pixels_by_instance() {
        let class = labels.class_of(id).expect("validated label map");
        let max = pixels
            .iter()
            .map(|&(y, x)| field[[y, x]])
            .fold(0.0_f64, f64::max);
        for &(y, x) in &pixels {
            plus[[y, x, class]] = field[[y, x]] / max;
        }
    }
    plus
}

/// Complementary map `δ⁻`: `1 − δ⁺` on thing pixels, 0 elsewhere.
pub fn complement_sdt(plus: &Array3<f64>, thing_mask: &Array3<f64>) -> Array3<f64> {
    let mut minus = Array3::zeros(plus.raw_dim());
    Zip::from(&mut minus)
        .and(plus)
        .and(thing_mask)
        .for_each(|m, &p, &t| {
            if t > 0.0 {
                *m = 1.0 - p;
            }
        });
    minus
}

/// Reference orientation map.
///
/// Stuff pixels are `[0, 0, 1]`. Instance pixels carry the unit in-plane
/// gradient of the unnormalized instance distance field, which points away
/// from the nearest boundary. Differences are central inside the instance and
/// one-sided where a neighbour leaves it; the gradient of one instance never
/// reads another instance's pixels. Where the gradient vanishes the vector
/// points at the instance centroid, and at the centroid itself it is
/// `[1, 0, 0]`.
pub fn orientation_from_labels(labels: &InstanceLabelMap) -> OrientationMap {
    let (h, w) = (labels.height(), labels.width());
    let ids = labels.ids();
    let field = instance_distance_field(labels);
    let mut theta = Array3::zeros((h, w, 3));
    for ((y, x), &id) in ids.indexed_iter() {
        if id == 0 {
            theta[[y, x, 2]] = 1.0;
        }
    }
    for (id, pixels) in labels.pixels_by_instance() {
        let n = pixels.len() as f64;
        let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let inside = |yy: isize, xx: isize| {
            yy >= 0
                && xx >= 0
                && (yy as usize) < h
                && (xx as usize) < w
                && ids[[yy as usize, xx as usize]] == id
        };
        let diff = |here: f64, prev: Option<f64>, next: Option<f64>| match (prev, next) {
            (Some(p), Some(n)) => (n - p) / 2.0,
            (None, Some(n)) => n - here,
            (Some(p), None) => here - p,
            (None, None) => 0.0,
        };
        for &(y, x) in &pixels {
            let (yi, xi) = (y as isize, x as isize);
            let at = |yy: isize, xx: isize| {
                inside(yy, xx).then(|| field[[yy as usize, xx as usize]])
            };
            let here = field[[y, x]];
            let gx = diff(here, at(yi, xi - 1), at(yi, xi + 1));
            let gy = diff(here, at(yi - 1, xi), at(yi + 1, xi));
            let (mut vx, mut vy) = (gx, gy);
            let mut norm = vx.hypot(vy);
            if norm == 0.0 {
                vx = cx - x as f64;
                vy = cy - y as f64;
                norm = vx.hypot(vy);
            }
            if norm < 1e-12 {
                vx = 1.0;
                vy = 0.0;
                norm = 1.0;
            }
            theta[[y, x, 0]] = vx / norm;
            theta[[y, x, 1]] = vy / norm;
        }
    }
    OrientationMap { theta }
}

/// Residual of the identity `Y = δ⁺ + δ⁻`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyResidual {
    /// Mean over channels of the per-channel mean squared residual.
    pub mean_squared: f64,
    pub per_channel: Vec<f64>,
    /// `Y − (δ⁺ + δ⁻)` per pixel and channel.
    pub map: Array3<f64>,
}

pub fn consistency_residual(
    y_thing: ArrayView3<f64>,
    plus: ArrayView3<f64>,
    minus: ArrayView3<f64>,
) -> Result<ConsistencyResidual> {
    if y_thing.dim() != plus.dim() || plus.dim() != minus.dim() {
        return Err(Error::shape(format!(
            "thing scores {:?}, δ⁺ {:?}, δ⁻ {:?}",
            y_thing.dim(),
            plus.dim(),
            minus.dim()
        )));
    }
    let mut map = Array3::zeros(y_thing.raw_dim());
    Zip::from(&mut map)
        .and(&y_thing)
        .and(&plus)
        .and(&minus)
        .for_each(|r, &y, &p, &m| *r = y - (p + m));
    let channels = map.len_of(Axis(2));
    let pixels = (map.len() / channels.max(1)).max(1) as f64;
    let per_channel: Vec<f64> = map
        .axis_iter(Axis(2))
        .map(|c| c.iter().map(|r| r * r).sum::<f64>() / pixels)
        .collect();
    let mean_squared = if channels == 0 {
        0.0
    } else {
        per_channel.iter().sum::<f64>() / channels as f64
    };
    Ok(ConsistencyResidual {
        mean_squared,
        per_channel,
        map,
    })
}
