//! Supervised loss terms, the unsupervised consistency loss, and their sum.
//!
//! Every loss takes channel-last arrays (the last axis is the channel axis,
//! all leading axes are pixels) and returns its value together with the
//! gradient with respect to the prediction. Values are accumulated in `f64`
//! whatever the element type.

use ndarray::{Array, ArrayView, Axis, Dimension, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

/// Probabilities are clamped to this floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn same_shape<A, B, D: Dimension>(a: &ArrayView<A, D>, b: &ArrayView<B, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn pixel_count<A, D: Dimension>(a: &ArrayView<A, D>) -> usize {
    let c = a.shape().last().copied().unwrap_or(1);
    a.len().checked_div(c).unwrap_or(0)
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("float conversion")
}

/// Mean over pixels of `−log max(p_ref, 1e-12)` for one-hot references.
pub fn ce_loss<F: Float, D: Dimension>(
    pred: ArrayView<F, D>,
    reference: ArrayView<F, D>,
) -> Result<(f64, Array<F, D>)> {
    same_shape(&pred, &reference, "cross-entropy")?;
    let n = pixel_count(&pred).max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Array::zeros(pred.raw_dim());
    Zip::from(&mut grad)
        .and(&pred)
        .and(&reference)
        .for_each(|g, &p, &r| {
            let r = r.to_f64().unwrap();
            if r != 0.0 {
                let p = p.to_f64().unwrap();
                let clamped = if p < PROB_FLOOR { PROB_FLOOR } else { p };
                sum -= r * clamped.ln();
                if p > PROB_FLOOR {
                    *g = cast(-r / (clamped * n));
                }
            }
        });
    Ok((sum / n, grad))
}

/// Mean over pixels of `1 − θ̂·θ`.
pub fn cosine_loss<F: Float, D: Dimension>(
    pred: ArrayView<F, D>,
    reference: ArrayView<F, D>,
) -> Result<(f64, Array<F, D>)> {
    same_shape(&pred, &reference, "cosine")?;
    let n = pixel_count(&pred);
    if n == 0 {
        return Ok((0.0, Array::zeros(pred.raw_dim())));
    }
    let last = Axis(pred.ndim() - 1);
    let mut sum = 0.0;
    for (p, r) in pred.lanes(last).into_iter().zip(reference.lanes(last)) {
        let dot: f64 = p
            .iter()
            .zip(r.iter())
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum();
        sum += 1.0 - dot;
    }
    let scale = -1.0 / n as f64;
    let grad = reference.mapv(|r| cast(r.to_f64().unwrap() * scale));
    Ok((sum / n as f64, grad))
}

/// Mean over all elements of `(pred − ref)²`.
pub fn mse_loss<F: Float, D: Dimension>(
    pred: ArrayView<F, D>,
    reference: ArrayView<F, D>,
) -> Result<(f64, Array<F, D>)> {
    same_shape(&pred, &reference, "mse")?;
    let n = pred.len();
    if n == 0 {
        return Ok((0.0, Array::zeros(pred.raw_dim())));
    }
    let mut sum = 0.0;
    let mut grad = Array::zeros(pred.raw_dim());
    let k = 2.0 / n as f64;
    Zip::from(&mut grad)
        .and(&pred)
        .and(&reference)
        .for_each(|g, &p, &r| {
            let d = p.to_f64().unwrap() - r.to_f64().unwrap();
            sum += d * d;
            *g = cast(k * d);
        });
    Ok((sum / n as f64, grad))
}

/// Value and gradients of [`consinstancy_loss`].
#[derive(Clone, Debug)]
pub struct ConsistencyLoss<F, D: Dimension> {
    pub value: f64,
    /// Gradient for the full semantic map; stuff channels are zero.
    pub d_semantic: Array<F, D>,
    pub d_plus: Array<F, D>,
    pub d_minus: Array<F, D>,
}

/// `Σ_i MSE(Y_i, δ⁺_i + δ⁻_i)` over the thing channels `i`, which are the last
/// `N_Th` channels of the semantic map. No reference data is involved.
pub fn consinstancy_loss<F: Float, D: Dimension>(
    semantic: ArrayView<F, D>,
    plus: ArrayView<F, D>,
    minus: ArrayView<F, D>,
) -> Result<ConsistencyLoss<F, D>> {
    same_shape(&plus, &minus, "consistency")?;
    let nd = semantic.ndim();
    if nd == 0 || plus.ndim() != nd {
        return Err(Error::shape("consistency: rank mismatch"));
    }
    let n_classes = semantic.shape()[nd - 1];
    let n_thing = plus.shape()[nd - 1];
    if n_thing == 0 || n_thing >= n_classes || semantic.shape()[..nd - 1] != plus.shape()[..nd - 1] {
        return Err(Error::shape(format!(
            "consistency: {n_thing} thing channels against a {:?} semantic map",
            semantic.shape()
        )));
    }
    let first = n_classes - n_thing;
    let y = semantic.slice_axis(Axis(nd - 1), (first..n_classes).into());
    let n = pixel_count(&plus).max(1) as f64;
    let mut sum = 0.0;
    let mut d_y = Array::zeros(plus.raw_dim());
    let mut d_plus = Array::zeros(plus.raw_dim());
    Zip::from(&mut d_y)
        .and(&mut d_plus)
        .and(&y)
        .and(&plus)
        .and(&minus)
        .for_each(|gy, gp, &yv, &p, &m| {
            let r = yv.to_f64().unwrap() - (p.to_f64().unwrap() + m.to_f64().unwrap());
            sum += r * r;
            *gy = cast(2.0 * r / n);
            *gp = cast(-2.0 * r / n);
        });
    let mut d_semantic = Array::zeros(semantic.raw_dim());
    d_semantic
        .slice_axis_mut(Axis(nd - 1), (first..n_classes).into())
        .assign(&d_y);
    Ok(ConsistencyLoss {
        value: sum / n,
        d_semantic,
        d_minus: d_plus.clone(),
        d_plus,
    })
}

/// Per-term multipliers; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub cos: f64,
    pub mse_plus: f64,
    pub mse_minus: f64,
    pub cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            cos: 1.0,
            mse_plus: 1.0,
            mse_minus: 1.0,
            cons: 1.0,
        }
    }
}

/// Loss terms of one step or epoch. Disabled terms are `None` and are left
/// out of the serialized record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mse_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mse_minus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cons: Option<f64>,
    pub total: f64,
}

impl LossReport {
    /// `(name, value)` of every enabled term.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut t = vec![("l_ce", self.l_ce)];
        let opt = [
            ("l_cos", self.l_cos),
            ("l_mse_plus", self.l_mse_plus),
            ("l_mse_minus", self.l_mse_minus),
            ("l_cons", self.l_cons),
        ];
        t.extend(opt.iter().filter_map(|(n, v)| v.map(|v| (*n, v))));
        t
    }
}

/// Supervised terms from the labelled half of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupervisedTerms {
    pub ce: f64,
    pub cos: Option<f64>,
    pub mse_plus: Option<f64>,
    pub mse_minus: Option<f64>,
}

/// Combine the terms enabled by `variant`: Seg uses cross-entropy only, Inst
/// adds the three instance terms, ConsInst adds the consistency term computed
/// on the unlabelled half.
pub fn total_loss(
    variant: Variant,
    supervised: &SupervisedTerms,
    consistency: Option<f64>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut r = LossReport {
        l_ce: supervised.ce,
        total: weights.ce * supervised.ce,
        ..LossReport::default()
    };
    if variant.has_instance_decoder() {
        let (Some(cos), Some(mp), Some(mm)) = (supervised.cos, supervised.mse_plus, supervised.mse_minus)
        else {
            return Err(Error::Precondition(format!(
                "variant {variant} needs the instance loss terms"
            )));
        };
        r.l_cos = Some(cos);
        r.l_mse_plus = Some(mp);
        r.l_mse_minus = Some(mm);
        r.total += weights.cos * cos + weights.mse_plus * mp + weights.mse_minus * mm;
    }
    if variant.uses_unlabeled() {
        let cons = consistency.ok_or_else(|| {
            Error::Precondition("the consistency loss needs an unlabelled batch half".into())
        })?;
        r.l_cons = Some(cons);
        r.total += weights.cons * cons;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representations::{complement_sdt, instance_sdt, InstanceLabelMap};
    use ndarray::{array, Array3, Ix3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;

    fn close(numeric: f64, analytic: f64) -> bool {
        let err = (numeric - analytic).abs();
        err <= 1e-3 || err <= 1e-4 * analytic.abs().max(numeric.abs())
    }

    /// Central differences of `f` at every element of `x`.
    fn numeric_grad(x: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) -> Array3<f64> {
        let mut g = Array3::zeros(x.raw_dim());
        for (idx, gv) in g.indexed_iter_mut() {
            let mut xp = x.clone();
            xp[idx] += STEP;
            let mut xm = x.clone();
            xm[idx] -= STEP;
            *gv = (f(&xp) - f(&xm)) / (2.0 * STEP);
        }
        g
    }

    fn assert_grad(numeric: &Array3<f64>, analytic: &Array3<f64>, what: &str) {
        for ((i, n), a) in numeric.indexed_iter().zip(analytic.iter()) {
            assert!(close(*n, *a), "{what} at {i:?}: numeric {n}, analytic {a}");
        }
    }

    fn random(shape: (usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn softmax(x: &Array3<f64>) -> Array3<f64> {
        let mut y = x.mapv(f64::exp);
        for mut lane in y.lanes_mut(Axis(2)) {
            let s = lane.sum();
            lane /= s;
        }
        y
    }

    fn one_hot(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        let mut r = Array3::zeros(shape);
        for mut lane in r.lanes_mut(Axis(2)) {
            let c = rng.random_range(0..lane.len());
            lane[c] = 1.0;
        }
        r
    }

    fn unit_field(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        let mut t = random((shape.0, shape.1, 3), -1.0, 1.0, rng);
        for mut lane in t.lanes_mut(Axis(2)) {
            let n = lane.dot(&lane).sqrt();
            lane /= n;
        }
        t
    }

    #[test]
    fn analytic_values() {
        let ref2 = array![[[1.0, 0.0], [0.0, 1.0]]];
        let uniform = Array3::from_elem((1, 2, 2), 0.5);
        let (v, _) = ce_loss(uniform.view(), ref2.view()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let (v, _) = ce_loss(ref2.view(), ref2.view()).unwrap();
        assert!(v.abs() < 1e-12);
        // the floor keeps a zero probability finite
        let (v, g) = ce_loss(ref2.view(), array![[[0.0, 1.0], [0.0, 1.0]]].view()).unwrap();
        assert!((v - (-(1e-12f64).ln()) / 2.0).abs() < 1e-9);
        assert!(g.iter().all(|x| x.is_finite()));

        let t = array![[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]];
        assert_eq!(cosine_loss(t.view(), t.view()).unwrap().0, 0.0);
        assert_eq!(cosine_loss(t.mapv(|v| -v).view(), t.view()).unwrap().0, 2.0);
        let perp = array![[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]];
        assert_eq!(cosine_loss(perp.view(), t.view()).unwrap().0, 1.0);

        let a = Array3::from_elem((2, 2, 1), 0.3);
        assert_eq!(mse_loss(a.view(), a.view()).unwrap().0, 0.0);
        let (v, _) = mse_loss((&a + 0.5).view(), a.view()).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_values() {
        let y = Array3::from_shape_fn((3, 3, 2), |(_, _, c)| c as f64);
        let quarter = Array3::from_elem((3, 3, 1), 0.25);
        let r = consinstancy_loss(y.view(), quarter.view(), quarter.view()).unwrap();
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!(r.d_semantic.index_axis(Axis(2), 0).iter().all(|&v| v == 0.0));

        // two thing classes contribute one MSE each
        let y3 = Array3::from_shape_fn((2, 2, 3), |(_, _, c)| if c == 0 { 0.0 } else { 1.0 });
        let q2 = Array3::from_elem((2, 2, 2), 0.25);
        let r = consinstancy_loss(y3.view(), q2.view(), q2.view()).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);

        let wrong = Array3::from_elem((3, 3, 2), 0.25);
        assert!(consinstancy_loss(y.view(), wrong.view(), wrong.view()).is_err());
    }

    #[test]
    fn consistency_is_zero_on_references() {
        let ids = ndarray::Array2::from_shape_fn((9, 11), |(y, x)| match (y, x) {
            (1..=4, 1..=5) => 1,
            (1..=4, 6..=9) => 2,
            (6..=7, 2..=8) => 3,
            _ => 0,
        });
        let labels = InstanceLabelMap::single_class(ids);
        let plus = instance_sdt(&labels);
        let minus = complement_sdt(&plus, &labels.thing_mask());
        let sem = crate::representations::semantic_from_labels(&labels, 2).unwrap();
        let r = consinstancy_loss(sem.scores.view(), plus.view(), minus.view()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = (4, 4, 3);
        let logits = random(shape, -2.0, 2.0, &mut rng);
        let p = softmax(&logits);
        let r = one_hot(shape, &mut rng);
        let (_, g) = ce_loss(p.view(), r.view()).unwrap();
        let n = numeric_grad(&p, |x| ce_loss(x.view(), r.view()).unwrap().0);
        assert_grad(&n, &g, "ce");

        let t = unit_field((4, 4), &mut rng);
        let tr = unit_field((4, 4), &mut rng);
        let (_, g) = cosine_loss(t.view(), tr.view()).unwrap();
        let n = numeric_grad(&t, |x| cosine_loss(x.view(), tr.view()).unwrap().0);
        assert_grad(&n, &g, "cos");

        let a = random((4, 4, 2), 0.0, 1.0, &mut rng);
        let b = random((4, 4, 2), 0.0, 1.0, &mut rng);
        let (_, g) = mse_loss(a.view(), b.view()).unwrap();
        let n = numeric_grad(&a, |x| mse_loss(x.view(), b.view()).unwrap().0);
        assert_grad(&n, &g, "mse");

        let y = softmax(&random((4, 4, 3), -2.0, 2.0, &mut rng));
        let dp = random((4, 4, 2), 0.0, 1.0, &mut rng);
        let dm = random((4, 4, 2), 0.0, 1.0, &mut rng);
        let c = consinstancy_loss(y.view(), dp.view(), dm.view()).unwrap();
        let n = numeric_grad(&y, |x| consinstancy_loss(x.view(), dp.view(), dm.view()).unwrap().value);
        assert_grad(&n, &c.d_semantic, "cons/Y");
        let n = numeric_grad(&dp, |x| consinstancy_loss(y.view(), x.view(), dm.view()).unwrap().value);
        assert_grad(&n, &c.d_plus, "cons/δ⁺");
        let n = numeric_grad(&dm, |x| consinstancy_loss(y.view(), dp.view(), x.view()).unwrap().value);
        assert_grad(&n, &c.d_minus, "cons/δ⁻");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array3::<f64>::zeros((2, 2, 2));
        let b = Array3::<f64>::zeros((2, 3, 2));
        assert!(ce_loss(a.view(), b.view()).is_err());
        assert!(cosine_loss(a.view(), b.view()).is_err());
        assert!(mse_loss(a.view(), b.view()).is_err());
    }

    #[test]
    fn f32_and_four_dimensional_inputs() {
        let p = ndarray::Array4::<f32>::from_elem((2, 2, 2, 2), 0.5);
        let r = ndarray::Array4::<f32>::from_shape_fn((2, 2, 2, 2), |(_, _, _, c)| c as f32);
        let (v, g) = ce_loss(p.view(), r.view()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-7);
        assert_eq!(g.dim(), (2, 2, 2, 2));
    }

    #[test]
    fn total_loss_by_variant() {
        let w = LossWeights::default();
        let s = SupervisedTerms {
            ce: 0.3,
            ..Default::default()
        };
        let r = total_loss(Variant::Seg, &s, None, &w).unwrap();
        assert_eq!(r.total, 0.3);
        assert!(r.l_cos.is_none());
        let s = SupervisedTerms {
            ce: 0.1,
            cos: Some(0.2),
            mse_plus: Some(0.3),
            mse_minus: Some(0.4),
        };
        let r = total_loss(Variant::Inst, &s, None, &w).unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
        let r = total_loss(Variant::ConsInst, &s, Some(0.05), &w).unwrap();
        assert!((r.total - 1.05).abs() < 1e-12);
        assert_eq!(r.l_cons, Some(0.05));
        assert!(total_loss(Variant::ConsInst, &s, None, &w).is_err());
        let json = serde_json::to_value(total_loss(Variant::Seg, &s, None, &w).unwrap()).unwrap();
        assert!(json.get("l_cos").is_none());
    }

    fn permute(a: &Array3<f64>, perm: &[usize]) -> Array3<f64> {
        let (h, w, c) = a.dim();
        Array3::from_shape_fn((h, w, c), |(y, x, k)| {
            let src = perm[y * w + x];
            a[[src / w, src % w, k]]
        })
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = (3, 4, 2);
            let mut perm: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let p = softmax(&random(shape, -2.0, 2.0, &mut rng));
            let r = one_hot(shape, &mut rng);
            let a = random(shape, 0.0, 1.0, &mut rng);
            let b = random(shape, 0.0, 1.0, &mut rng);
            let (pp, rp, ap, bp) = (permute(&p, &perm), permute(&r, &perm), permute(&a, &perm), permute(&b, &perm));
            let eq = |x: f64, y: f64| (x - y).abs() <= 1e-12;
            prop_assert!(eq(ce_loss(p.view(), r.view()).unwrap().0, ce_loss(pp.view(), rp.view()).unwrap().0));
            prop_assert!(eq(mse_loss(a.view(), b.view()).unwrap().0, mse_loss(ap.view(), bp.view()).unwrap().0));
            let t = unit_field((3, 4), &mut rng);
            let u = unit_field((3, 4), &mut rng);
            prop_assert!(eq(cosine_loss(t.view(), u.view()).unwrap().0,
                cosine_loss(permute(&t, &perm).view(), permute(&u, &perm).view()).unwrap().0));
            let a1 = a.slice_axis(Axis(2), (0..1).into()).to_owned().into_dimensionality::<Ix3>().unwrap();
            let b1 = b.slice_axis(Axis(2), (0..1).into()).to_owned();
            let c1 = consinstancy_loss(p.view(), a1.view(), b1.view()).unwrap().value;
            let c2 = consinstancy_loss(pp.view(), permute(&a1, &perm).view(), permute(&b1, &perm).view()).unwrap().value;
            prop_assert!(eq(c1, c2));
        }
    }
}
