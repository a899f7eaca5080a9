//! Seedable generator of particle scenes with instance annotations.
//!
//! A scene is a grayscale image of elliptical particles ("aggregate") embedded
//! in a textured background ("suspension"), together with the instance label
//! map. Particles never overlap. With probability `adjacency_prob` a new
//! particle is slid against an existing one until the two touch; otherwise it
//! keeps at least one pixel of clearance from every other particle.
//!
//! Labels are drawn from one random stream and the image from another, so the
//! rendering parameters (`boundary_softness`, `noise_std`, `texture_scale`)
//! never change the label map.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::representations::InstanceLabelMap;

const ATTEMPTS_PER_PARTICLE: usize = 400;
const SLIDE_STEP: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub particle_count_range: [usize; 2],
    /// Range of both ellipse semi-axes, in pixels.
    pub radius_range: [f64; 2],
    pub adjacency_prob: f64,
    /// Gaussian blur sigma in pixels; 0 renders crisp boundaries.
    pub boundary_softness: f64,
    pub noise_std: f64,
    pub texture_scale: f64,
    pub seed: u64,
}

/// Rendering presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    /// Crisp particle outlines, rarely touching.
    Sedimentation,
    /// Blurred, partly indistinct outlines and frequent contact.
    Fresh,
}

impl SceneSpec {
    pub fn preset(mode: SceneMode, height: usize, width: usize, seed: u64) -> Self {
        match mode {
            SceneMode::Sedimentation => SceneSpec {
                height,
                width,
                particle_count_range: [4, 9],
                radius_range: [3.0, 8.0],
                adjacency_prob: 0.15,
                boundary_softness: 0.0,
                noise_std: 0.03,
                texture_scale: 1.0,
                seed,
            },
            SceneMode::Fresh => SceneSpec {
                height,
                width,
                particle_count_range: [4, 9],
                radius_range: [3.0, 8.0],
                adjacency_prob: 0.4,
                boundary_softness: 0.8,
                noise_std: 0.05,
                texture_scale: 1.5,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        let [cmin, cmax] = self.particle_count_range;
        if cmin > cmax {
            return bad(format!("particle count range [{cmin}, {cmax}] is empty"));
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin >= 1.0 && rmin <= rmax) {
            return bad(format!("radius range [{rmin}, {rmax}] must satisfy 1 <= min <= max"));
        }
        if rmax * 2.0 >= self.height.min(self.width) as f64 {
            return bad(format!(
                "particles of radius {rmax} do not fit a {}x{} frame",
                self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.adjacency_prob) {
            return bad(format!("adjacency_prob {} outside [0, 1]", self.adjacency_prob));
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return bad(format!("noise_std {} outside [0, 1]", self.noise_std));
        }
        if !(self.boundary_softness >= 0.0 && self.boundary_softness.is_finite()) {
            return bad("boundary_softness must be finite and >= 0".into());
        }
        if !(self.texture_scale >= 0.0 && self.texture_scale.is_finite()) {
            return bad("texture_scale must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Particle {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    phi: f64,
    pixels: Vec<(usize, usize)>,
}

impl Particle {
    /// Squared normalized radius of a pixel centre; `<= 1` means inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.phi.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }
}

/// Pixels whose centres fall inside the ellipse, or `None` if any of them
/// would leave the frame.
fn rasterize(
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    phi: f64,
    h: usize,
    w: usize,
) -> Option<Particle> {
    let r = a.max(b);
    if cy - r < 0.0 || cx - r < 0.0 || cy + r > (h - 1) as f64 || cx + r > (w - 1) as f64 {
        return None;
    }
    let mut p = Particle {
        cy,
        cx,
        a,
        b,
        phi,
        pixels: Vec::new(),
    };
    let (y0, y1) = ((cy - r).floor() as usize, (cy + r).ceil() as usize);
    let (x0, x1) = ((cx - r).floor() as usize, (cx + r).ceil() as usize);
    for y in y0..=y1.min(h - 1) {
        for x in x0..=x1.min(w - 1) {
            if p.rho2(y as f64, x as f64) <= 1.0 {
                p.pixels.push((y, x));
            }
        }
    }
    (!p.pixels.is_empty()).then_some(p)
}

fn four_connected(pixels: &[(usize, usize)]) -> bool {
    let set: std::collections::HashSet<_> = pixels.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut queue = VecDeque::from([pixels[0]]);
    seen.insert(pixels[0]);
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |p: (usize, usize)| {
            if set.contains(&p) && seen.insert(p) {
                queue.push_back(p);
            }
        };
        visit((y + 1, x));
        visit((y, x + 1));
        if y > 0 {
            visit((y - 1, x));
        }
        if x > 0 {
            visit((y, x - 1));
        }
    }
    seen.len() == set.len()
}

/// `(overlaps, touches)` of a candidate against the occupied id map, where
/// touching means an 8-neighbour pixel carries another id.
fn contact(ids: &Array2<u32>, pixels: &[(usize, usize)]) -> (bool, bool) {
    let (h, w) = ids.dim();
    let mut touches = false;
    for &(y, x) in pixels {
        if ids[[y, x]] != 0 {
            return (true, true);
        }
        if !touches {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && ids[[yy as usize, xx as usize]] != 0
                    {
                        touches = true;
                    }
                }
            }
        }
    }
    (false, touches)
}

fn place_particles(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Particle>> {
    let (h, w) = (spec.height, spec.width);
    let [cmin, cmax] = spec.particle_count_range;
    let count = rng.random_range(cmin..=cmax);
    let [rmin, rmax] = spec.radius_range;
    let mut ids = Array2::<u32>::zeros((h, w));
    let mut placed: Vec<Particle> = Vec::with_capacity(count);
    let mut attempts = 0;
    for k in 0..count {
        let mut accepted = None;
        for _ in 0..ATTEMPTS_PER_PARTICLE {
            attempts += 1;
            let a = rng.random_range(rmin..=rmax);
            let b = rng.random_range(rmin..=rmax);
            let phi = rng.random_range(0.0..PI);
            let r = a.max(b);
            let adjacent = !placed.is_empty() && rng.random_bool(spec.adjacency_prob);
            let candidate = if adjacent {
                let target = &placed[rng.random_range(0..placed.len())];
                let alpha = rng.random_range(0.0..2.0 * PI);
                let (dy, dx) = alpha.sin_cos();
                let mut dist = target.a.max(target.b) + r + 2.0;
                let mut last_free = None;
                // Slide towards the target until the rasters collide.
                while dist > 0.0 {
                    let (cy, cx) = (target.cy + dy * dist, target.cx + dx * dist);
                    match rasterize(cy, cx, a, b, phi, h, w) {
                        Some(p) => {
                            if contact(&ids, &p.pixels).0 {
                                break;
                            }
                            last_free = Some(p);
                        }
                        None => last_free = None,
                    }
                    dist -= SLIDE_STEP;
                }
                last_free.filter(|p| contact(&ids, &p.pixels) == (false, true))
            } else {
                let (ymax, xmax) = ((h - 1) as f64 - r, (w - 1) as f64 - r);
                if ymax < r || xmax < r {
                    continue;
                }
                let cy = rng.random_range(r..=ymax);
                let cx = rng.random_range(r..=xmax);
                rasterize(cy, cx, a, b, phi, h, w)
                    .filter(|p| contact(&ids, &p.pixels) == (false, false))
            };
            if let Some(p) = candidate.filter(|p| four_connected(&p.pixels)) {
                accepted = Some(p);
                break;
            }
        }
        let p = accepted.ok_or(Error::OverDense {
            placed: k,
            requested: count,
            attempts,
        })?;
        for &(y, x) in &p.pixels {
            ids[[y, x]] = k as u32 + 1;
        }
        placed.push(p);
    }
    Ok(placed)
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = img.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img[[y, reflect(x as i64 + k as i64 - radius, w)]];
            }
            tmp[[y, x]] = acc / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(y as i64 + k as i64 - radius, h), x]];
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

fn render(spec: &SceneSpec, particles: &[Particle], ids: &Array2<u32>, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (h, w) = (spec.height, spec.width);
    // Background: low-frequency sinusoid texture around a dark base level.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.05) * spec.texture_scale,
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let background = Array2::from_shape_fn((h, w), |(y, x)| {
        0.3 + waves
            .iter()
            .map(|&(amp, fy, fx, ph)| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
            .sum::<f64>()
    });
    let mut img = background.clone();
    let soft = spec.boundary_softness > 0.0;
    for (k, p) in particles.iter().enumerate() {
        let id = k as u32 + 1;
        let base = rng.random_range(0.55..0.9);
        // Fresh-concrete mode hides an arc of each outline in the suspension.
        let arc = if soft {
            let start = rng.random_range(0.0..2.0 * PI);
            let span = rng.random_range(0.3 * PI..PI);
            Some((start, span))
        } else {
            None
        };
        for &(y, x) in &p.pixels {
            let rho2 = p.rho2(y as f64, x as f64);
            let mut v = base * (1.0 - 0.25 * rho2);
            let on_outline = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                yy < 0
                    || xx < 0
                    || yy as usize >= h
                    || xx as usize >= w
                    || ids[[yy as usize, xx as usize]] != id
            });
            if on_outline {
                v *= 0.8;
            }
            if let Some((start, span)) = arc {
                let angle = (y as f64 - p.cy).atan2(x as f64 - p.cx).rem_euclid(2.0 * PI);
                let offset = (angle - start).rem_euclid(2.0 * PI);
                if rho2 > 0.5 && offset < span {
                    v = 0.25 * v + 0.75 * background[[y, x]];
                }
            }
            img[[y, x]] = v;
        }
    }
    if soft {
        img = gaussian_blur(&img, spec.boundary_softness);
    }
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    img.mapv(|v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32)
}

/// One scene: a grayscale image in `[0, 1]` and its instance label map.
/// Instance ids run `1..=K` in placement order.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Array2<f32>, InstanceLabelMap)> {
    spec.validate()?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    let particles = place_particles(spec, &mut label_rng)?;
    let mut ids = Array2::<u32>::zeros((spec.height, spec.width));
    for (k, p) in particles.iter().enumerate() {
        for &(y, x) in &p.pixels {
            ids[[y, x]] = k as u32 + 1;
        }
    }
    let mut render_rng = ChaCha8Rng::seed_from_u64(seed);
    render_rng.set_stream(1);
    let image = render(spec, &particles, &ids, &mut render_rng);
    Ok((image, InstanceLabelMap::single_class(ids)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// A generated split. Paths are stored relative to the manifest file's
/// directory; [`DatasetManifest::load`] remembers that directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split_name: String,
    pub spec: SceneSpec,
    pub labeled_items: Vec<LabeledItem>,
    pub unlabeled_items: Vec<PathBuf>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: DatasetManifest = io::read_json(path)?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Image and label map of labelled item `i`.
    pub fn load_labeled(&self, i: usize) -> Result<(Array2<f32>, InstanceLabelMap)> {
        let item = &self.labeled_items[i];
        let image = io::load_gray_png(&self.resolve(&item.image))?;
        let ids = io::load_u16_png(&self.resolve(&item.labels))?;
        Ok((image, InstanceLabelMap::single_class(ids)))
    }

    pub fn load_unlabeled(&self, i: usize) -> Result<Array2<f32>> {
        io::load_gray_png(&self.resolve(&self.unlabeled_items[i]))
    }
}

/// Writes `n_labeled` image/label pairs and `n_unlabeled` images under
/// `out_dir/<split_name>/` and the manifest to `out_dir/<split_name>.json`.
/// Labelled item `i` uses seed `spec.seed + i`, unlabelled item `j` uses
/// `spec.seed + n_labeled + j`.
pub fn generate_split(
    spec: &SceneSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    out_dir: &Path,
    split_name: &str,
) -> Result<DatasetManifest> {
    spec.validate()?;
    io::create_dir(out_dir)?;
    let mut manifest = DatasetManifest {
        split_name: split_name.to_string(),
        spec: spec.clone(),
        labeled_items: Vec::with_capacity(n_labeled),
        unlabeled_items: Vec::with_capacity(n_unlabeled),
        root: out_dir.to_path_buf(),
    };
    for i in 0..n_labeled {
        let (image, labels) = generate_scene(spec, spec.seed + i as u64)?;
        let item = LabeledItem {
            image: PathBuf::from(format!("{split_name}/labeled/img_{i:05}.png")),
            labels: PathBuf::from(format!("{split_name}/labeled/lbl_{i:05}.png")),
        };
        io::save_gray_png(&out_dir.join(&item.image), &image)?;
        io::save_u16_png(&out_dir.join(&item.labels), labels.ids())?;
        manifest.labeled_items.push(item);
    }
    for j in 0..n_unlabeled {
        let (image, _) = generate_scene(spec, spec.seed + (n_labeled + j) as u64)?;
        let path = PathBuf::from(format!("{split_name}/unlabeled/img_{j:05}.png"));
        io::save_gray_png(&out_dir.join(&path), &image)?;
        manifest.unlabeled_items.push(path);
    }
    for path in manifest
        .labeled_items
        .iter()
        .flat_map(|i| [&i.image, &i.labels])
        .chain(&manifest.unlabeled_items)
    {
        let full = out_dir.join(path);
        if !full.is_file() {
            return Err(Error::io(
                full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "written file is missing"),
            ));
        }
    }
    manifest.save(&out_dir.join(format!("{split_name}.json")))?;
    Ok(manifest)
}

/// [`generate_split`] with split name `train`.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_split(spec, n_labeled, n_unlabeled, out_dir, "train")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec() -> SceneSpec {
        SceneSpec::preset(SceneMode::Sedimentation, 64, 64, 11)
    }

    #[test]
    fn empty_scene() {
        let mut s = spec();
        s.particle_count_range = [0, 0];
        let (img, labels) = generate_scene(&s, 7).unwrap();
        assert!(labels.ids().iter().all(|&v| v == 0));
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(labels.instance_ids().count(), 0);
    }

    /// Pixel count of a rasterized circle over a grid of sub-pixel centre
    /// offsets.
    fn circle_area_bounds(r: f64) -> (usize, usize) {
        let (mut lo, mut hi) = (usize::MAX, 0);
        for i in 0..20 {
            for j in 0..20 {
                let (oy, ox) = (i as f64 / 20.0, j as f64 / 20.0);
                let mut n = 0;
                for y in -10i32..=10 {
                    for x in -10i32..=10 {
                        let (dy, dx) = (y as f64 - oy, x as f64 - ox);
                        if dy * dy + dx * dx <= r * r {
                            n += 1;
                        }
                    }
                }
                lo = lo.min(n);
                hi = hi.max(n);
            }
        }
        (lo, hi)
    }

    #[test]
    fn single_particle_area() {
        let (lo, hi) = circle_area_bounds(5.0);
        assert!(lo >= 60 && hi <= 100, "oracle bounds {lo}..{hi}");
        let mut s = spec();
        s.particle_count_range = [1, 1];
        s.radius_range = [5.0, 5.0];
        let (_, labels) = generate_scene(&s, 3).unwrap();
        let ids: Vec<u32> = labels.instance_ids().collect();
        assert_eq!(ids, vec![1]);
        let area = labels.ids().iter().filter(|&&v| v == 1).count();
        assert!((lo..=hi).contains(&area), "area {area}");
    }

    #[test]
    fn deterministic() {
        let s = SceneSpec::preset(SceneMode::Fresh, 64, 64, 0);
        let a = generate_scene(&s, 42).unwrap();
        let b = generate_scene(&s, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.radius_range = [3.0, 40.0];
        assert!(matches!(generate_scene(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = spec();
        s.adjacency_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.particle_count_range = [5, 2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn over_dense_rejected() {
        let mut s = spec();
        s.height = 24;
        s.width = 24;
        s.radius_range = [8.0, 8.0];
        s.particle_count_range = [30, 30];
        assert!(matches!(generate_scene(&s, 1), Err(Error::OverDense { .. })));
    }

    fn components_4(ids: &Array2<u32>, id: u32) -> usize {
        let pixels: Vec<(usize, usize)> = ids
            .indexed_iter()
            .filter(|(_, &v)| v == id)
            .map(|(p, _)| p)
            .collect();
        let mut seen = BTreeSet::new();
        let mut comps = 0;
        for &start in &pixels {
            if !seen.insert(start) {
                continue;
            }
            comps += 1;
            let mut stack = vec![start];
            while let Some((y, x)) = stack.pop() {
                for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 {
                        continue;
                    }
                    let p = (yy as usize, xx as usize);
                    if ids.get(p) == Some(&id) && seen.insert(p) {
                        stack.push(p);
                    }
                }
            }
        }
        comps
    }

    #[test]
    fn instances_connected_and_adjacency_occurs() {
        let s = SceneSpec::preset(SceneMode::Fresh, 64, 64, 0);
        let mut touching_scenes = 0;
        for seed in 0..50 {
            let (_, labels) = generate_scene(&s, seed).unwrap();
            let ids = labels.ids();
            for id in labels.instance_ids() {
                assert_eq!(components_4(ids, id), 1, "seed {seed} id {id}");
            }
            let (h, w) = ids.dim();
            let touching = ids.indexed_iter().any(|((y, x), &a)| {
                a > 0
                    && [(0i64, 1i64), (1, 0), (1, 1), (1, -1)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy >= 0
                            && xx >= 0
                            && (yy as usize) < h
                            && (xx as usize) < w
                            && ids[[yy as usize, xx as usize]] > 0
                            && ids[[yy as usize, xx as usize]] != a
                    })
            });
            touching_scenes += usize::from(touching);
        }
        assert!(touching_scenes > 0);
    }

    #[test]
    fn no_contact_without_adjacency() {
        let mut s = spec();
        s.adjacency_prob = 0.0;
        for seed in 0..20 {
            let (_, labels) = generate_scene(&s, seed).unwrap();
            let ids = labels.ids();
            for ((y, x), &a) in ids.indexed_iter() {
                if a == 0 {
                    continue;
                }
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    if let Some(&b) = ids.get((y + dy, x + dx)) {
                        assert!(b == 0 || b == a);
                    }
                }
                if x > 0 {
                    if let Some(&b) = ids.get((y + 1, x - 1)) {
                        assert!(b == 0 || b == a);
                    }
                }
            }
        }
    }

    #[test]
    fn softness_changes_image_only() {
        let crisp = spec();
        let mut soft = crisp.clone();
        soft.boundary_softness = 1.5;
        soft.noise_std = 0.2;
        soft.texture_scale = 3.0;
        for seed in 0..5 {
            let (ia, la) = generate_scene(&crisp, seed).unwrap();
            let (ib, lb) = generate_scene(&soft, seed).unwrap();
            assert_eq!(la, lb);
            assert_ne!(ia, ib);
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SceneSpec::preset(SceneMode::Sedimentation, 32, 32, 5);
        s.radius_range = [2.0, 4.0];
        let m = generate_dataset(&s, 2, 2, &dir.path().join("a")).unwrap();
        assert_eq!(m.labeled_items.len(), 2);
        assert_eq!(m.unlabeled_items.len(), 2);
        let m2 = generate_dataset(&s, 2, 2, &dir.path().join("b")).unwrap();
        assert_eq!(m.labeled_items, m2.labeled_items);
        for item in &m.labeled_items {
            let a = std::fs::read(dir.path().join("a").join(&item.image)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&item.image)).unwrap();
            assert_eq!(a, b);
        }
        let loaded = DatasetManifest::load(&dir.path().join("a/train.json")).unwrap();
        assert_eq!(loaded.labeled_items, m.labeled_items);
        let (img, labels) = loaded.load_labeled(1).unwrap();
        let (want_img, want_labels) = generate_scene(&s, 6).unwrap();
        assert_eq!(labels, want_labels);
        assert_eq!(img.dim(), want_img.dim());

        let only_unlabeled = generate_dataset(&s, 0, 5, &dir.path().join("c")).unwrap();
        assert!(only_unlabeled.labeled_items.is_empty());
        assert_eq!(only_unlabeled.unlabeled_items.len(), 5);
    }

    #[test]
    fn default_sized_split_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = SceneSpec::preset(SceneMode::Sedimentation, 16, 16, 0);
        let mut s = s;
        s.radius_range = [2.0, 3.0];
        s.particle_count_range = [1, 2];
        let m = generate_dataset(&s, 17, 827, dir.path()).unwrap();
        assert_eq!(m.labeled_items.len(), 17);
        assert_eq!(m.unlabeled_items.len(), 827);
        let labeled: BTreeSet<_> = m.labeled_items.iter().map(|i| i.image.clone()).collect();
        assert!(m.unlabeled_items.iter().all(|p| !labeled.contains(p)));
    }
}
