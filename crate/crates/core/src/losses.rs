//! Classification and cross-modal contrastive objectives, plus a
//! finite-difference gradient checker.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Mat, Scalar};
use crate::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Class ids for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    ids: Vec<usize>,
    classes: usize,
}

impl BatchLabels {
    pub fn new(ids: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&c| c >= classes) {
            return Err(Error::Input(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(Self { ids, classes })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        self.ids
            .iter()
            .map(|&c| {
                let mut row = vec![0.0; self.classes];
                row[c] = 1.0;
                row
            })
            .collect()
    }
}

/// Per-batch loss components. For single-objective variants the unused
/// components are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce_light: f64,
    pub l_ce_imu: f64,
    pub l_co: f64,
    pub l_total: f64,
}

fn check_probs<F: Scalar>(probs: &Mat<F>, labels: &BatchLabels) -> Result<()> {
    if probs.rows == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.rows != labels.len() || probs.cols != labels.classes() {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs {} labels over {} classes",
            probs.rows,
            probs.cols,
            labels.len(),
            labels.classes()
        )));
    }
    for r in 0..probs.rows {
        let s: f64 = probs.row(r).iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).sum();
        if !((s - 1.0).abs() <= ROW_SUM_TOLERANCE) {
            return Err(Error::Input(format!(
                "row {r} of the probability matrix sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class, with the log argument
/// clamped at [`LOG_CLAMP`].
pub fn cross_entropy<F: Scalar>(probs: &Mat<F>, labels: &BatchLabels) -> Result<F> {
    check_probs(probs, labels)?;
    let clamp = F::lit(LOG_CLAMP);
    let mut sum = F::zero();
    for (r, &c) in labels.ids().iter().enumerate() {
        sum += -(probs.row(r)[c].max(clamp)).ln();
    }
    Ok(sum / F::from_usize(labels.len()).unwrap())
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
pub fn cross_entropy_grad_probs<F: Scalar>(probs: &Mat<F>, labels: &BatchLabels) -> Result<Mat<F>> {
    check_probs(probs, labels)?;
    let clamp = F::lit(LOG_CLAMP);
    let b = F::from_usize(labels.len()).unwrap();
    let mut g = Mat::zeros(probs.rows, probs.cols);
    for (r, &c) in labels.ids().iter().enumerate() {
        let p = probs.row(r)[c];
        if p >= clamp {
            g.row_mut(r)[c] = -F::one() / (b * p);
        }
    }
    Ok(g)
}

/// Gradient of softmax followed by [`cross_entropy`] with respect to the
/// logits, `(p - y) / B`. Used in training instead of chaining through the
/// softmax Jacobian, which loses the signal once `p` underflows.
pub fn cross_entropy_grad_logits<F: Scalar>(probs: &Mat<F>, labels: &BatchLabels) -> Result<Mat<F>> {
    check_probs(probs, labels)?;
    let b = F::from_usize(labels.len()).unwrap();
    let mut g = probs.clone();
    for (r, &c) in labels.ids().iter().enumerate() {
        g.row_mut(r)[c] -= F::one();
        g.row_mut(r).iter_mut().for_each(|v| *v = *v / b);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
    /// Attach the hinge to same-class pairs instead of different-class pairs.
    pub eq2_literal: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            eq2_literal: false,
        }
    }
}

impl ContrastiveConfig {
    fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "contrastive margin must be positive, got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Whether a pair with this class relation goes through the hinge.
    fn hinged(&self, same_class: bool) -> bool {
        same_class == self.eq2_literal
    }
}

fn check_embeddings<F: Scalar>(
    z_a: &Mat<F>,
    z_b: &Mat<F>,
    labels_a: &BatchLabels,
    labels_b: &BatchLabels,
) -> Result<()> {
    if z_a.rows == 0 || z_b.rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if z_a.cols != z_b.cols {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            z_a.cols, z_b.cols
        )));
    }
    if z_a.rows != labels_a.len() || z_b.rows != labels_b.len() {
        return Err(Error::Shape("embedding rows do not match label count".into()));
    }
    if !z_a.is_finite() || !z_b.is_finite() {
        return Err(Error::Input("non-finite embedding".into()));
    }
    Ok(())
}

fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// Mean over all `|a| * |b|` cross-modal pairs. Same-class pairs contribute
/// their squared distance, different-class pairs `max(0, m - d^2)` (flipped
/// by `eq2_literal`).
pub fn contrastive_loss<F: Scalar>(
    z_a: &Mat<F>,
    z_b: &Mat<F>,
    labels_a: &BatchLabels,
    labels_b: &BatchLabels,
    cfg: &ContrastiveConfig,
) -> Result<F> {
    Ok(contrastive_impl(z_a, z_b, labels_a, labels_b, cfg, false)?.0)
}

/// [`contrastive_loss`] together with its gradients for both batches. At
/// `d^2 == m` the hinge uses the zero subgradient.
pub fn contrastive_loss_with_grad<F: Scalar>(
    z_a: &Mat<F>,
    z_b: &Mat<F>,
    labels_a: &BatchLabels,
    labels_b: &BatchLabels,
    cfg: &ContrastiveConfig,
) -> Result<(F, Mat<F>, Mat<F>)> {
    let (v, g) = contrastive_impl(z_a, z_b, labels_a, labels_b, cfg, true)?;
    let (ga, gb) = g.expect("gradients requested");
    Ok((v, ga, gb))
}

#[allow(clippy::type_complexity)]
fn contrastive_impl<F: Scalar>(
    z_a: &Mat<F>,
    z_b: &Mat<F>,
    labels_a: &BatchLabels,
    labels_b: &BatchLabels,
    cfg: &ContrastiveConfig,
    with_grad: bool,
) -> Result<(F, Option<(Mat<F>, Mat<F>)>)> {
    cfg.validate()?;
    check_embeddings(z_a, z_b, labels_a, labels_b)?;
    let m = F::lit(cfg.margin);
    let pairs = F::from_usize(z_a.rows * z_b.rows).unwrap();
    let two = F::lit(2.0);
    let mut total = F::zero();
    let mut grads = with_grad.then(|| (Mat::zeros(z_a.rows, z_a.cols), Mat::zeros(z_b.rows, z_b.cols)));
    for i in 0..z_a.rows {
        let zi = z_a.row(i);
        for j in 0..z_b.rows {
            let zj = z_b.row(j);
            let d2 = squared_distance(zi, zj);
            let same = labels_a.ids()[i] == labels_b.ids()[j];
            let (term, slope) = if cfg.hinged(same) {
                if m - d2 > F::zero() {
                    (m - d2, -F::one())
                } else {
                    (F::zero(), F::zero())
                }
            } else {
                (d2, F::one())
            };
            total += term;
            if let Some((ga, gb)) = grads.as_mut() {
                if slope != F::zero() {
                    let k = two * slope / pairs;
                    let gi = ga.row_mut(i);
                    for (g, (x, y)) in gi.iter_mut().zip(zi.iter().zip(zj)) {
                        *g += k * (*x - *y);
                    }
                    let gj = gb.row_mut(j);
                    for (g, (x, y)) in gj.iter_mut().zip(zi.iter().zip(zj)) {
                        *g -= k * (*x - *y);
                    }
                }
            }
        }
    }
    Ok((total / pairs, grads))
}

/// Flat coordinates (over `[z_a; z_b]`) whose perturbation by `eps` can push
/// some hinged pair across `d^2 == m`, where the loss is not differentiable.
pub fn contrastive_kink_coords(
    z_a: &Mat<f64>,
    z_b: &Mat<f64>,
    labels_a: &BatchLabels,
    labels_b: &BatchLabels,
    cfg: &ContrastiveConfig,
    eps: f64,
) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let offset_b = z_a.data.len();
    for i in 0..z_a.rows {
        for j in 0..z_b.rows {
            let same = labels_a.ids()[i] == labels_b.ids()[j];
            if !cfg.hinged(same) {
                continue;
            }
            let d2 = squared_distance(z_a.row(i), z_b.row(j));
            for k in 0..z_a.cols {
                let diff = (z_a.row(i)[k] - z_b.row(j)[k]).abs();
                let reach = 2.0 * diff * eps + eps * eps;
                if (cfg.margin - d2).abs() <= reach {
                    out.insert(i * z_a.cols + k);
                    out.insert(offset_b + j * z_b.cols + k);
                }
            }
        }
    }
    out
}

/// Sum of the three components, accumulated as `l_co + l_ce_light + l_ce_imu`.
pub fn total_loss(l_co: f64, l_ce_light: f64, l_ce_imu: f64) -> Result<LossReport> {
    for (name, v) in [("l_co", l_co), ("l_ce_light", l_ce_light), ("l_ce_imu", l_ce_imu)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Input(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(LossReport {
        l_ce_light,
        l_ce_imu,
        l_co,
        l_total: l_co + l_ce_light + l_ce_imu,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Sampled coordinates skipped as non-differentiable points.
    pub excluded: Vec<usize>,
}

/// Denominator floor for the relative error; below it both values are
/// treated as zero.
const REL_ERROR_FLOOR: f64 = 1e-8;

/// Central finite differences on a seeded subsample of at most
/// `opts.max_coords` coordinates, compared against `analytic`.
/// Coordinates for which `excluded` returns true are reported, not checked.
pub fn grad_check<L, X>(
    mut loss_fn: L,
    inputs: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
    excluded: X,
) -> Result<GradCheckReport>
where
    L: FnMut(&[f64]) -> f64,
    X: Fn(usize) -> bool,
{
    if inputs.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} gradient entries",
            inputs.len(),
            analytic.len()
        )));
    }
    if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite input at {i}")));
    }
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at {i}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = inputs.len();
    let mut coords: Vec<usize> = if n <= opts.max_coords {
        (0..n).collect()
    } else {
        sample(&mut rng, n, opts.max_coords).into_vec()
    };
    coords.sort_unstable();

    let mut x = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        excluded: Vec::new(),
    };
    for c in coords {
        if excluded(c) {
            report.excluded.push(c);
            continue;
        }
        let orig = x[c];
        x[c] = orig + opts.epsilon;
        let up = loss_fn(&x);
        x[c] = orig - opts.epsilon;
        let down = loss_fn(&x);
        x[c] = orig;
        let numeric = (up - down) / (2.0 * opts.epsilon);
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!("non-finite finite difference at {c}")));
        }
        let a = analytic[c];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < REL_ERROR_FLOOR {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        if err > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = err;
            report.worst_coord = Some(c);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn labels(ids: &[usize]) -> BatchLabels {
        BatchLabels::new(ids.to_vec(), 10).unwrap()
    }

    fn one_hot_probs(ids: &[usize]) -> Mat<f64> {
        let mut m = Mat::zeros(ids.len(), 10);
        for (r, &c) in ids.iter().enumerate() {
            m.row_mut(r)[c] = 1.0;
        }
        m
    }

    #[test]
    fn cross_entropy_of_correct_one_hot_is_zero() {
        let ids = [3, 0, 9];
        assert_eq!(cross_entropy(&one_hot_probs(&ids), &labels(&ids)).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln10() {
        let p = Mat::from_vec(2, 10, vec![0.1f64; 20]);
        let v = cross_entropy(&p, &labels(&[1, 7])).unwrap();
        assert_relative_eq!(v, 10f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(v, 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_two_sample_example() {
        let mut p = Mat::zeros(2, 10);
        p.row_mut(0)[0] = 0.9;
        p.row_mut(0)[1] = 0.1;
        p.row_mut(1)[4] = 0.5;
        p.row_mut(1)[5] = 0.5;
        let v = cross_entropy(&p, &labels(&[0, 4])).unwrap();
        let expected = (-(0.9f64).ln() - (0.5f64).ln()) / 2.0;
        assert_relative_eq!(v, expected, epsilon = 1e-15);
        assert_relative_eq!(v, 0.39926, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_rows_and_empty_batches() {
        let p = Mat::from_vec(1, 10, vec![0.2f64; 10]);
        assert!(matches!(cross_entropy(&p, &labels(&[0])), Err(Error::Input(_))));
        let empty = Mat::<f64>::zeros(0, 10);
        assert!(matches!(cross_entropy(&empty, &labels(&[])), Err(Error::EmptyBatch)));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut p = Mat::zeros(1, 10);
        p.row_mut(0)[1] = 1.0;
        let v = cross_entropy(&p, &labels(&[0])).unwrap();
        assert_relative_eq!(v, -(LOG_CLAMP.ln()), epsilon = 1e-9);
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        assert!(BatchLabels::new(vec![10], 10).is_err());
    }

    #[test]
    fn contrastive_identical_same_class_is_zero() {
        let z = Mat::from_vec(2, 3, vec![0.5f64, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let l = labels(&[4, 4]);
        let v = contrastive_loss(&z, &z, &l, &l, &ContrastiveConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn contrastive_saturated_hinge_is_zero() {
        let a = Mat::from_vec(1, 2, vec![0.0f64, 0.0]);
        let b = Mat::from_vec(1, 2, vec![2.0f64, 0.0]);
        let v = contrastive_loss(&a, &b, &labels(&[0]), &labels(&[1]), &ContrastiveConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn contrastive_two_by_two_example() {
        let z = Mat::from_vec(2, 2, vec![0.0f64, 0.0, 1.0, 0.0]);
        let l = labels(&[0, 1]);
        let v = contrastive_loss(&z, &z, &l, &l, &ContrastiveConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn contrastive_literal_flag_swaps_roles() {
        let a = Mat::from_vec(1, 1, vec![0.0f64]);
        let b = Mat::from_vec(1, 1, vec![0.5f64]);
        let same = labels(&[2]);
        let prose = contrastive_loss(&a, &b, &same, &same, &ContrastiveConfig::default()).unwrap();
        assert_relative_eq!(prose, 0.25);
        let literal = ContrastiveConfig {
            margin: 1.0,
            eq2_literal: true,
        };
        let lit = contrastive_loss(&a, &b, &same, &same, &literal).unwrap();
        assert_relative_eq!(lit, 0.75);
    }

    #[test]
    fn contrastive_errors() {
        let a = Mat::from_vec(1, 2, vec![0.0f64, 0.0]);
        let b = Mat::from_vec(1, 3, vec![0.0f64, 0.0, 0.0]);
        let l = labels(&[0]);
        assert!(matches!(
            contrastive_loss(&a, &b, &l, &l, &ContrastiveConfig::default()),
            Err(Error::Shape(_))
        ));
        let bad = ContrastiveConfig {
            margin: 0.0,
            eq2_literal: false,
        };
        assert!(matches!(contrastive_loss(&a, &a, &l, &l, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_sums_and_validates() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().l_total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0).unwrap().l_total, 6.0);
        assert!(total_loss(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn logit_gradient_matches_chain_through_softmax() {
        use crate::nn::{softmax_rows, softmax_rows_backward};
        let logits = Mat::from_vec(2, 10, (0..20).map(|i| (i as f64 * 0.77).sin()).collect());
        let p = softmax_rows(&logits);
        let l = labels(&[3, 8]);
        let fused = cross_entropy_grad_logits(&p, &l).unwrap();
        let chained = softmax_rows_backward(&p, &cross_entropy_grad_probs(&p, &l).unwrap());
        for (a, b) in fused.data.iter().zip(&chained.data) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let x = [1.0, 2.0];
        let good = grad_check(f, &x, &[2.0, 3.0], &GradCheckOptions::default(), |_| false).unwrap();
        assert!(good.max_rel_error < 1e-8);
        let bad = grad_check(f, &x, &[2.0, 4.0], &GradCheckOptions::default(), |_| false).unwrap();
        assert!(bad.max_rel_error > 0.2);
        assert_eq!(bad.worst_coord, Some(1));
    }

    #[test]
    fn grad_check_rejects_non_finite_gradient() {
        let r = grad_check(|x| x[0], &[1.0], &[f64::NAN], &GradCheckOptions::default(), |_| false);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn hinge_boundary_coordinate_is_excluded() {
        // d^2 == m exactly for a different-class pair
        let a = Mat::from_vec(1, 1, vec![0.0f64]);
        let b = Mat::from_vec(1, 1, vec![1.0f64]);
        let (la, lb) = (labels(&[0]), labels(&[1]));
        let cfg = ContrastiveConfig::default();
        let kinks = contrastive_kink_coords(&a, &b, &la, &lb, &cfg, 1e-3);
        assert_eq!(kinks.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        let (_, ga, gb) = contrastive_loss_with_grad(&a, &b, &la, &lb, &cfg).unwrap();
        let analytic = [ga.data[0], gb.data[0]];
        let f = |x: &[f64]| {
            let za = Mat::from_vec(1, 1, vec![x[0]]);
            let zb = Mat::from_vec(1, 1, vec![x[1]]);
            contrastive_loss(&za, &zb, &la, &lb, &cfg).unwrap()
        };
        let kinks = contrastive_kink_coords(&a, &b, &la, &lb, &cfg, 1e-3);
        let rep = grad_check(f, &[0.0, 1.0], &analytic, &GradCheckOptions::default(), |c| kinks.contains(&c)).unwrap();
        assert_eq!(rep.excluded, vec![0, 1]);
        assert_eq!(rep.checked, 0);
    }

    fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mat<f64>> {
        prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
    }

    proptest! {
        #[test]
        fn contrastive_is_symmetric_and_non_negative(
            za in mat_strategy(3, 4),
            zb in mat_strategy(3, 4),
            la in prop::collection::vec(0usize..3, 3),
            lb in prop::collection::vec(0usize..3, 3),
        ) {
            let (la, lb) = (labels(&la), labels(&lb));
            let cfg = ContrastiveConfig::default();
            let ab = contrastive_loss(&za, &zb, &la, &lb, &cfg).unwrap();
            let ba = contrastive_loss(&zb, &za, &lb, &la, &cfg).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        }

        #[test]
        fn contrastive_invariant_under_rotation(
            za in mat_strategy(3, 2),
            zb in mat_strategy(2, 2),
            la in prop::collection::vec(0usize..2, 3),
            lb in prop::collection::vec(0usize..2, 2),
            angle in 0.0f64..std::f64::consts::TAU,
            shift in -3.0f64..3.0,
        ) {
            let rot = |m: &Mat<f64>| {
                let (c, s) = (angle.cos(), angle.sin());
                let mut out = m.clone();
                for r in 0..m.rows {
                    let (x, y) = (m.row(r)[0], m.row(r)[1]);
                    out.row_mut(r)[0] = c * x - s * y + shift;
                    out.row_mut(r)[1] = s * x + c * y - shift;
                }
                out
            };
            let (la, lb) = (labels(&la), labels(&lb));
            let cfg = ContrastiveConfig::default();
            let before = contrastive_loss(&za, &zb, &la, &lb, &cfg).unwrap();
            let after = contrastive_loss(&rot(&za), &rot(&zb), &la, &lb, &cfg).unwrap();
            prop_assert!((before - after).abs() <= 1e-9 * (1.0 + before.abs()));
        }

        #[test]
        fn cross_entropy_permutation_invariant(
            logits in mat_strategy(4, 10),
            ids in prop::collection::vec(0usize..10, 4),
            perm_seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let p = crate::nn::softmax_rows(&logits);
            let base = cross_entropy(&p, &labels(&ids)).unwrap();
            prop_assert!(base >= 0.0);
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut pp = Mat::zeros(4, 10);
            let mut pids = Vec::new();
            for (dst, &src) in order.iter().enumerate() {
                pp.row_mut(dst).copy_from_slice(p.row(src));
                pids.push(ids[src]);
            }
            let permuted = cross_entropy(&pp, &labels(&pids)).unwrap();
            prop_assert!((base - permuted).abs() <= 1e-12);
        }
    }
}
