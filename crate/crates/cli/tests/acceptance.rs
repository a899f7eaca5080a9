//! Acceptance suite: one check per acceptance criterion, each printing a
//! PASS/FAIL line. Runs as a plain binary so the summary is always visible.
//!
//! `cargo test --test acceptance -- 3 5` runs only criteria 3 and 5.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use consinstancy::io::read_float_map;
use consinstancy::losses::{ce_loss, consinstancy_loss, cosine_loss, mse_loss};
use consinstancy::metrics::{instance_f1, match_instances, panoptic_quality, semantic_metrics, Evaluator, InstanceCounts};
use consinstancy::model::Variant;
use consinstancy::nn::ops::{unit_normalize, unit_normalize_backward};
use consinstancy::panoptic::{panoptic_segment, same_partition, PanopticMap};
use consinstancy::representations::{instance_sdt, orientation_from_labels, InstanceLabelMap, References};
use consinstancy::synthdata::{generate_scene, DatasetManifest, SceneMode, SceneSpec};
use consinstancy::training::{load_labeled, train_samples, TrainConfig};
use consinstancy_cli::ablate::{AblateConfig, Stat};
use consinstancy_cli::generate::{self, GenerateConfig};
use consinstancy_cli::reps::{self, MakeRepsConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spec(mode: SceneMode, h: usize, w: usize, seed: u64) -> SceneSpec {
    SceneSpec::preset(mode, h, w, seed)
}

// ---------------------------------------------------------------- criterion 1

/// O(N²) oracle: for every instance pixel the distance to the nearest pixel
/// with a different id, normalized by the instance maximum.
fn brute_force_sdt(ids: &Array2<u32>) -> Array2<f64> {
    let (h, w) = ids.dim();
    let mut d = Array2::<f64>::zeros((h, w));
    for ((y, x), &id) in ids.indexed_iter() {
        if id == 0 {
            continue;
        }
        let mut best = f64::INFINITY;
        for ((yy, xx), &other) in ids.indexed_iter() {
            if other != id {
                let dy = y as f64 - yy as f64;
                let dx = x as f64 - xx as f64;
                best = best.min((dy * dy + dx * dx).sqrt());
            }
        }
        d[[y, x]] = if best.is_finite() { best } else { 1.0 };
    }
    let mut max: BTreeMap<u32, f64> = BTreeMap::new();
    for (&id, &v) in ids.iter().zip(d.iter()) {
        if id != 0 {
            let m = max.entry(id).or_insert(0.0);
            *m = m.max(v);
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| match ids[[y, x]] {
        0 => 0.0,
        id => d[[y, x]] / max[&id],
    })
}

fn random_label_maps(n: usize) -> Vec<Array2<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..n)
        .map(|i| {
            let h = rng.random_range(8..=64);
            let w = rng.random_range(8..=64);
            match i % 4 {
                // blocky random partitions with arbitrary, sparse ids
                0 => {
                    let cell = rng.random_range(2..=8);
                    let ids: Vec<u32> = (0..64).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..60_000) }).collect();
                    Array2::from_shape_fn((h, w), |(y, x)| ids[(y / cell * 7 + x / cell) % 64])
                }
                // i.i.d. pixel noise: disconnected instances, many touching
                1 => Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u32)),
                _ => {
                    let mode = if i % 4 == 2 { SceneMode::Sedimentation } else { SceneMode::Fresh };
                    let (h, w) = (h.max(20), w.max(20));
                    let mut s = spec(mode, h, w, i as u64);
                    s.radius_range = [2.0, (h.min(w) as f64 / 2.0 - 1.0).min(9.0)];
                    s.particle_count_range = [1, 6];
                    // dense draws on small frames may not fit; take the next seed
                    (0..)
                        .find_map(|k| generate_scene(&s, (i + 1000 * k) as u64).ok())
                        .expect("some seed fits")
                        .1
                        .ids()
                        .clone()
                }
            }
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let maps = random_label_maps(200);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for ids in &maps {
        let labels = InstanceLabelMap::single_class(ids.clone());
        let fast = instance_sdt(&labels);
        let oracle = brute_force_sdt(ids);
        for ((y, x), &v) in oracle.indexed_iter() {
            worst = worst.max((fast[[y, x, 0]] - v).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("200 maps, max |error| {worst:.2e} (tol 1e-9), {secs:.1} s (limit 60 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn corpus(dir: &Path) -> Vec<(PathBuf, DatasetManifest)> {
    let mut out = Vec::new();
    for (name, mode) in [("sed", "sedimentation"), ("fresh", "fresh")] {
        let c = GenerateConfig {
            out_dir: dir.join(name),
            labeled: 40,
            unlabeled: 0,
            test_labeled: 20,
            mode: generate::parse_mode(mode).unwrap(),
            seed: 77,
            ..GenerateConfig::default()
        };
        let g = generate::run(&c).expect("generate");
        out.push((c.out_dir.join(generate::TRAIN_MANIFEST), g.train));
        out.push((c.out_dir.join(generate::TEST_MANIFEST), g.test.expect("test split")));
    }
    out
}

fn criterion_2(tmp: &Path) -> Outcome {
    let mut maps = 0;
    let mut bad_sum = 0usize;
    let mut worst_cons = 0.0f64;
    let mut bad_stored = 0usize;
    for (k, (path, manifest)) in corpus(tmp).into_iter().enumerate() {
        for i in 0..manifest.labeled_items.len() {
            let (_, labels) = manifest.load_labeled(i).expect("labels");
            let r = References::from_labels(&labels, 2).expect("references");
            let mask = labels.thing_mask();
            let sum = &r.distances.plus + &r.distances.minus;
            bad_sum += sum.iter().zip(mask.iter()).filter(|(s, m)| s.to_bits() != m.to_bits()).count();
            let l = consinstancy_loss(r.semantic.scores.view(), r.distances.plus.view(), r.distances.minus.view()).expect("loss");
            worst_cons = worst_cons.max(l.value.abs());
            maps += 1;
        }
        // stored f32 maps as exported by make-reps
        let out = tmp.join(format!("reps_{k}"));
        reps::run(&MakeRepsConfig {
            manifest: path.clone(),
            out_dir: out.clone(),
            ..MakeRepsConfig::default()
        })
        .expect("make-reps");
        for (i, item) in manifest.labeled_items.iter().enumerate() {
            let stem = item.image.file_stem().unwrap().to_str().unwrap();
            let plus = read_float_map(&out.join(format!("{stem}_plus.citf"))).unwrap();
            let minus = read_float_map(&out.join(format!("{stem}_minus.citf"))).unwrap();
            let (_, labels) = manifest.load_labeled(i).unwrap();
            let mask = labels.thing_mask();
            bad_stored += plus
                .iter()
                .zip(minus.iter())
                .zip(mask.iter())
                .filter(|((p, m), t)| (*p + *m).to_bits() != (**t as f32).to_bits())
                .count();
        }
    }
    check(
        bad_sum == 0 && bad_stored == 0 && worst_cons == 0.0,
        format!(
            "{maps} reference maps: {bad_sum} f64 and {bad_stored} stored-f32 pixels violate δ⁺+δ⁻ = mask bitwise; max consistency loss {worst_cons:e}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

type FacingPairs = Vec<((usize, usize), (usize, usize))>;

/// Two full-height strips sharing a vertical edge between columns `k` and
/// `k + 1`; returns the map and the facing pixel pairs.
fn strip_scene(h: usize, w: usize, k: usize, right_end: usize) -> (Array2<u32>, FacingPairs) {
    let ids = Array2::from_shape_fn((h, w), |(_, x)| {
        if x <= k {
            3
        } else if x <= right_end {
            9
        } else {
            0
        }
    });
    let pairs = (0..h).map(|y| ((y, k), (y, k + 1))).collect();
    (ids, pairs)
}

/// Two rectangles stacked with a shared horizontal edge; interior columns
/// only (outline corners have no defined facing direction).
fn stacked_scene(h: usize, w: usize) -> (Array2<u32>, FacingPairs) {
    let mid = h / 2;
    let ids = Array2::from_shape_fn((h, w), |(y, x)| {
        if x == 0 || x == w - 1 || y == 0 || y == h - 1 {
            0
        } else if y < mid {
            1
        } else {
            2
        }
    });
    let pairs = (2..w - 2).map(|x| ((mid - 1, x), (mid, x))).collect();
    (ids, pairs)
}

fn criterion_3() -> Outcome {
    let mut worst_norm = 0.0f64;
    let mut bad_stuff = 0usize;
    let mut pixels = 0usize;
    for seed in 0..60u64 {
        let mode = if seed % 2 == 0 { SceneMode::Sedimentation } else { SceneMode::Fresh };
        let mut s = spec(mode, 64, 64, seed);
        s.adjacency_prob = 0.6;
        let (_, labels) = generate_scene(&s, seed).expect("scene");
        let theta = orientation_from_labels(&labels).theta;
        for ((y, x), &id) in labels.ids().indexed_iter() {
            let v = [theta[[y, x, 0]], theta[[y, x, 1]], theta[[y, x, 2]]];
            worst_norm = worst_norm.max(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs());
            if id == 0 && v != [0.0, 0.0, 1.0] {
                bad_stuff += 1;
            }
            pixels += 1;
        }
    }
    let mut worst_angle = 0.0f64;
    let mut facing = 0;
    let scenes = [
        strip_scene(12, 20, 6, 15),
        strip_scene(9, 30, 13, 29),
        strip_scene(16, 16, 2, 9),
        stacked_scene(14, 12),
        stacked_scene(21, 17),
    ];
    for (ids, pairs) in scenes {
        let theta = orientation_from_labels(&InstanceLabelMap::single_class(ids)).theta;
        for (a, b) in pairs {
            let ang = |p: (usize, usize)| theta[[p.0, p.1, 1]].atan2(theta[[p.0, p.1, 0]]);
            let mut d = (ang(a) - ang(b)).abs();
            if d > std::f64::consts::PI {
                d = 2.0 * std::f64::consts::PI - d;
            }
            worst_angle = worst_angle.max((d - std::f64::consts::PI).abs());
            facing += 1;
        }
    }
    check(
        worst_norm <= 1e-6 && bad_stuff == 0 && worst_angle <= 1e-3,
        format!(
            "{pixels} pixels: max |‖θ‖−1| {worst_norm:.1e}, {bad_stuff} stuff pixels ≠ [0,0,1]; {facing} facing pairs: max |angle−π| {worst_angle:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

const FD_STEP: f64 = 1e-4;

#[derive(Default)]
struct GradStats {
    worst_abs: f64,
    worst_rel: f64,
    n: usize,
}

impl GradStats {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.worst_abs = self.worst_abs.max(abs);
        self.worst_rel = self.worst_rel.max(abs / analytic.abs().max(numeric.abs()).max(1e-8));
        self.n += 1;
    }

    fn ok(&self) -> bool {
        self.worst_abs <= 1e-3 && self.worst_rel <= 1e-4
    }
}

fn fd_check(stats: &mut GradStats, x: &ArrayD<f64>, grad: &ArrayD<f64>, f: impl Fn(&ArrayD<f64>) -> f64) {
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += FD_STEP;
        xm.as_slice_mut().unwrap()[i] -= FD_STEP;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        stats.record(grad.as_slice().unwrap()[i], numeric);
    }
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> ArrayD<f64> {
    let logits = ArrayD::from_shape_fn(IxDyn(&[4, 4, c]), |_| rng.random_range(-2.0..2.0f64));
    let mut p = logits.mapv(f64::exp);
    for y in 0..4 {
        for x in 0..4 {
            let s: f64 = (0..c).map(|k| p[[y, x, k]]).sum();
            for k in 0..c {
                p[[y, x, k]] /= s;
            }
        }
    }
    p
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut per: BTreeMap<&str, GradStats> = BTreeMap::new();
    for _ in 0..20 {
        let c = rng.random_range(2..5);
        let pred = random_probs(&mut rng, c);
        let reference = random_probs(&mut rng, c);
        let (_, g) = ce_loss(pred.view(), reference.view()).unwrap();
        fd_check(per.entry("ce_loss").or_default(), &pred, &g, |p| ce_loss(p.view(), reference.view()).unwrap().0);

        let v = ArrayD::from_shape_fn(IxDyn(&[4, 4, 3]), |_| rng.random_range(-1.0..1.0f64));
        let r = ArrayD::from_shape_fn(IxDyn(&[4, 4, 3]), |_| rng.random_range(-1.0..1.0f64));
        let (_, g) = cosine_loss(v.view(), r.view()).unwrap();
        fd_check(per.entry("cosine_loss").or_default(), &v, &g, |p| cosine_loss(p.view(), r.view()).unwrap().0);

        let a = ArrayD::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(0.0..1.0f64));
        let b = ArrayD::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(0.0..1.0f64));
        let (_, g) = mse_loss(a.view(), b.view()).unwrap();
        fd_check(per.entry("mse_loss").or_default(), &a, &g, |p| mse_loss(p.view(), b.view()).unwrap().0);

        let sem = random_probs(&mut rng, 3);
        let plus = ArrayD::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(0.0..1.0f64));
        let minus = ArrayD::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(0.0..1.0f64));
        let l = consinstancy_loss(sem.view(), plus.view(), minus.view()).unwrap();
        let stats = per.entry("consinstancy_loss").or_default();
        fd_check(stats, &sem, &l.d_semantic, |s| consinstancy_loss(s.view(), plus.view(), minus.view()).unwrap().value);
        fd_check(stats, &plus, &l.d_plus, |p| consinstancy_loss(sem.view(), p.view(), minus.view()).unwrap().value);
        fd_check(stats, &minus, &l.d_minus, |m| consinstancy_loss(sem.view(), plus.view(), m.view()).unwrap().value);

        // unit normalization through a random linear read-out
        let stats = per.entry("unit_normalize").or_default();
        for _ in 0..16 {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let wts: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let f = |v: [f64; 3]| {
                let u = unit_normalize(v, 1e-8);
                u[0] * wts[0] + u[1] * wts[1] + u[2] * wts[2]
            };
            let g = unit_normalize_backward(v, wts, 1e-8);
            for i in 0..3 {
                let (mut vp, mut vm) = (v, v);
                vp[i] += FD_STEP;
                vm[i] -= FD_STEP;
                stats.record(g[i], (f(vp) - f(vm)) / (2.0 * FD_STEP));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = per.values().all(GradStats::ok) && secs < 10.0;
    let detail = per
        .iter()
        .map(|(k, s)| format!("{k} abs {:.1e} rel {:.1e} ({} coords)", s.worst_abs, s.worst_rel, s.n))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, format!("{detail}; {secs:.2} s (limit 10 s)"))
}

// ---------------------------------------------------------------- criterion 5

fn round_trip(labels: &InstanceLabelMap, tau: f64) -> (bool, f64) {
    let r = References::from_labels(labels, 2).expect("references");
    let pan = panoptic_segment(&r.semantic, &r.distances.minus, tau).expect("panoptic");
    let mut eval = Evaluator::new(2, 0.5);
    eval.add(&pan, labels).expect("evaluate");
    (same_partition(&pan.id_of_pixel, labels.ids()), eval.report(Some(tau)).unwrap().pq)
}

fn criterion_5() -> Outcome {
    let mut failures = 0;
    let mut min_pq = 1.0f64;
    for seed in 0..100u64 {
        let mode = if seed % 2 == 0 { SceneMode::Sedimentation } else { SceneMode::Fresh };
        let mut s = spec(mode, 64, 64, 5000 + seed);
        s.adjacency_prob = 0.0;
        s.radius_range = [3.0, 8.0];
        let (_, labels) = generate_scene(&s, 5000 + seed).expect("scene");
        let (same, pq) = round_trip(&labels, 0.9);
        failures += usize::from(!same || pq != 1.0);
        min_pq = min_pq.min(pq);
    }
    // touching particles are separable at tau 0.9 once they are wide enough
    // for the shared outline to reach δ⁻ ≥ 0.9 (inscribed radius ≥ 10 px)
    let mut touching_failures = 0;
    let mut touching_pairs = 0;
    for seed in 0..20u64 {
        let mut s = spec(SceneMode::Sedimentation, 96, 96, 9000 + seed);
        s.adjacency_prob = 1.0;
        s.radius_range = [11.0, 14.0];
        s.particle_count_range = [3, 5];
        let (_, labels) = generate_scene(&s, 9000 + seed).expect("scene");
        touching_pairs += count_touching(labels.ids());
        let (same, pq) = round_trip(&labels, 0.9);
        touching_failures += usize::from(!same || pq != 1.0);
    }
    check(
        failures == 0 && touching_failures == 0 && touching_pairs > 0,
        format!(
            "100 separated scenes (radius ≥ 3): {failures} failures, min PQ {min_pq}; \
             20 touching scenes (radius ≥ 11, {touching_pairs} touching pairs): {touching_failures} failures"
        ),
    )
}

fn count_touching(ids: &Array2<u32>) -> usize {
    let mut pairs = std::collections::BTreeSet::new();
    let (h, w) = ids.dim();
    for y in 0..h {
        for x in 0..w {
            let a = ids[[y, x]];
            for (yy, xx) in [(y + 1, x), (y, x + 1)] {
                if yy < h && xx < w {
                    let b = ids[[yy, xx]];
                    if a != 0 && b != 0 && a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    pairs.len()
}

// ---------------------------------------------------------------- criterion 6

fn single_row(ids: &[u32]) -> Array2<u32> {
    Array2::from_shape_vec((1, ids.len()), ids.to_vec()).unwrap()
}

fn panoptic_of(ids: Array2<u32>) -> PanopticMap {
    PanopticMap {
        class_of_pixel: ids.mapv(|i| u16::from(i > 0)),
        id_of_pixel: ids,
    }
}

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    // pred covers pixels 0..4, reference 1..5: 3 shared of 5 → IoU 0.6
    let pred = panoptic_of(single_row(&[1, 1, 1, 1, 0, 0]));
    let m = match_instances(&pred, &InstanceLabelMap::single_class(single_row(&[0, 4, 4, 4, 4, 0])), 2, 0.5).unwrap();
    let c = InstanceCounts::from_matching(&m);
    let (pq, f1) = (panoptic_quality(&c).value, instance_f1(&c).value);
    ok &= m.true_positives.len() == 1 && m.true_positives[0].iou == 0.6 && pq == 0.6 && f1 == 1.0;
    notes.push(format!("IoU 0.6 case: TP {} PQ {pq} F1 {f1}", c.tp));
    // 2 shared of 6 → IoU 1/3 → FP + FN
    let m = match_instances(&pred, &InstanceLabelMap::single_class(single_row(&[0, 0, 4, 4, 4, 4])), 2, 0.5).unwrap();
    ok &= m.true_positives.is_empty() && m.false_positives.len() == 1 && m.false_negatives.len() == 1;
    notes.push(format!("IoU 1/3 case: FP {} FN {}", m.false_positives.len(), m.false_negatives.len()));
    // 1 TP at IoU 0.8 plus one FP and one FN: 4 of 5 pixels, a stray
    // predicted segment and a missed reference segment
    let pred = panoptic_of(single_row(&[1, 1, 1, 1, 0, 0, 2, 0, 0]));
    let reference = InstanceLabelMap::single_class(single_row(&[5, 5, 5, 5, 5, 0, 0, 0, 6]));
    let c = InstanceCounts::from_matching(&match_instances(&pred, &reference, 2, 0.5).unwrap());
    let (pq, f1) = (panoptic_quality(&c).value, instance_f1(&c).value);
    ok &= (c.tp, c.fp, c.fn_) == (1, 1, 1) && c.iou_sum == 0.8 && pq == 0.4 && f1 == 0.5;
    notes.push(format!("IoU 0.8 + FP + FN case: PQ {pq} F1 {f1}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..5usize);
        let p = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..n as u16));
        let r = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..n as u16));
        let m = semantic_metrics(&[(&p, &r)], n).unwrap();
        let correct = p.iter().zip(r.iter()).filter(|(a, b)| a == b).count();
        let mut expect = vec![m.oa == correct as f64 / 64.0];
        for c in 0..n as u16 {
            let tp = p.iter().zip(r.iter()).filter(|&(&a, &b)| a == c && b == c).count() as f64;
            let npred = p.iter().filter(|&&a| a == c).count() as f64;
            let nref = r.iter().filter(|&&b| b == c).count() as f64;
            let rec = if nref == 0.0 { 0.0 } else { tp / nref };
            let prec = if npred == 0.0 { 0.0 } else { tp / npred };
            let f1 = if rec + prec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            let got = m.per_class[c as usize];
            expect.push(got.recall == rec && got.precision == prec && got.f1 == f1);
        }
        mismatches += expect.iter().filter(|e| !**e).count();
    }
    ok &= mismatches == 0;
    notes.push(format!("200 random 8×8 maps: {mismatches} exact mismatches against counting oracle"));
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let c = GenerateConfig {
        out_dir: tmp.join("overfit"),
        labeled: 4,
        unlabeled: 0,
        test_labeled: 0,
        seed: 700,
        ..GenerateConfig::default()
    };
    let manifest = generate::run(&c).expect("generate").train;
    let labeled = load_labeled(&manifest, 2).expect("load");
    let config = TrainConfig {
        variant: Variant::Inst,
        max_epochs: 500,
        seed: 7,
        ..TrainConfig::default()
    };
    let (state, history) = train_samples(&config, &labeled, &[], |_| {}).expect("train");
    let network = state.network().unwrap();
    let mut eval = Evaluator::new(2, 0.5);
    for i in 0..labeled.len() {
        let (image, labels) = manifest.load_labeled(i).unwrap();
        let pred = network.predict(&state.params, &image).unwrap();
        let (_, d) = pred.instance.as_ref().unwrap();
        let pan = panoptic_segment(&pred.semantic, &d.minus, 0.9).unwrap();
        eval.add(&pan, &labels).unwrap();
    }
    let oa = eval.report(None).unwrap().oa;
    let secs = start.elapsed().as_secs_f64();
    check(
        oa >= 0.99 && history.records.len() <= 500 && secs < 15.0 * 60.0,
        format!("Inst, 4 labelled 64×64 scenes, {} epochs: training OA {oa:.4} (need ≥ 0.99), {secs:.0} s", history.records.len()),
    )
}

// ---------------------------------------------------------------- criterion 8

/// Optimizer steps per run; identical for every variant.
const ABLATION_STEPS: usize = 600;
const ABLATION_BLOCKS: usize = 3;

fn criterion_8(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let data = tmp.join("ablation_data");
    generate::run(&GenerateConfig {
        out_dir: data.clone(),
        labeled: 8,
        unlabeled: 256,
        test_labeled: 50,
        seed: 100,
        ..GenerateConfig::default()
    })
    .expect("generate");
    let config = AblateConfig {
        manifest: data.join(generate::TRAIN_MANIFEST),
        test_manifest: data.join(generate::TEST_MANIFEST),
        out_dir: tmp.join("ablation"),
        seeds: vec![1, 2, 3],
        variants: Variant::ALL.to_vec(),
        steps: Some(ABLATION_STEPS),
        train: TrainConfig {
            n_blocks: ABLATION_BLOCKS,
            ..TrainConfig::default()
        },
        ..AblateConfig::default()
    };
    let report = consinstancy_cli::ablate::run(&config).expect("ablation");
    for cell in &report.cells {
        match &cell.metrics {
            Some(m) => println!(
                "    seed {} {:<8} OA {:.4}  MF1 {:.4}  PQ {:.4}  F1_inst {:.4}",
                cell.seed, cell.variant.to_string(), m.oa, m.mf1, m.pq, m.f1_inst
            ),
            None => println!("    seed {} {:<8} failed: {:?}", cell.seed, cell.variant.to_string(), cell.error),
        }
    }
    let median = |v: Variant, f: fn(&consinstancy_cli::ablate::CellMetrics) -> f64| {
        let xs: Vec<f64> = report.cells.iter().filter(|c| c.variant == v).filter_map(|c| c.metrics.as_ref()).map(f).collect();
        Stat::of(&xs).median
    };
    let (seg_oa, cons_oa) = (median(Variant::Seg, |m| m.oa), median(Variant::ConsInst, |m| m.oa));
    let (seg_pq, cons_pq) = (median(Variant::Seg, |m| m.pq), median(Variant::ConsInst, |m| m.pq));
    let secs = start.elapsed().as_secs_f64();
    let ok = report.failures() == 0
        && matches!((seg_oa, cons_oa), (Some(s), Some(c)) if c >= s)
        && matches!((seg_pq, cons_pq), (Some(s), Some(c)) if c >= s);
    let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    check(
        ok,
        format!(
            "median test OA ConsInst {} vs Seg {}; median PQ ConsInst {} vs Seg {} ({} steps per run, {:.0} s)",
            f(cons_oa),
            f(seg_oa),
            f(cons_pq),
            f(seg_pq),
            ABLATION_STEPS,
            secs
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_consinstancy"))
}

fn run_in(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = bin().current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timings.jsonl") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(tmp: &Path) -> Outcome {
    let first = tmp.join("first");
    let second = tmp.join("second");
    std::fs::create_dir_all(&first).unwrap();
    std::fs::create_dir_all(&second).unwrap();
    // (output directory, command line) in pipeline order; all paths relative
    let steps: Vec<(&str, Vec<&str>)> = vec![
        ("data", vec!["generate", "--out", "data", "--labeled", "4", "--unlabeled", "8", "--test-labeled", "3", "--seed", "9"]),
        ("reps", vec!["make-reps", "--manifest", "data/test.json", "--out", "reps"]),
        ("run", vec!["train", "--manifest", "data/train.json", "--out", "run", "--variant", "ConsInst", "--epochs", "2", "--quiet"]),
        ("pred", vec!["infer", "--checkpoint", "run/final.ckpt", "--manifest", "data/test.json", "--out", "pred"]),
        ("eval", vec!["evaluate", "--predictions", "pred", "--manifest", "data/test.json", "--tau", "0.5,0.9", "--out", "eval"]),
        ("abl", vec!["ablate", "--manifest", "data/train.json", "--test-manifest", "data/test.json", "--out", "abl", "--seeds", "1", "--steps", "2"]),
    ];
    for (_, args) in &steps {
        run_in(&first, args)?;
    }
    for (dir, args) in &steps {
        let snapshot = first.join(dir).join("effective_config.json");
        let cmd = args[0];
        run_in(&second, &[cmd, "--config", snapshot.to_str().unwrap()])?;
    }
    let (a, b) = (files_under(&first), files_under(&second));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    check(
        differing.is_empty(),
        format!(
            "6 commands re-run from their effective_config.json: {} files compared, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = |name: &str| {
        let d = tmp.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "representation oracle equivalence", Box::new(criterion_1)),
        (2, "δ⁺ + δ⁻ identity", Box::new(|| criterion_2(&dir("c2")))),
        (3, "orientation invariants", Box::new(criterion_3)),
        (4, "gradient checks", Box::new(criterion_4)),
        (5, "panoptic round trip", Box::new(criterion_5)),
        (6, "metric oracle", Box::new(criterion_6)),
        (7, "overfit smoke test", Box::new(|| criterion_7(&dir("c7")))),
        (8, "directional semi-supervised effect", Box::new(|| criterion_8(&dir("c8")))),
        (9, "determinism", Box::new(|| criterion_9(&dir("c9")))),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in &criteria {
        if !wanted.is_empty() && !wanted.contains(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{took}] {d}"),
            Err(d) => {
                println!("criterion {n} ({name}): FAIL [{took}] {d}");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
