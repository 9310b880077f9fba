//! Probability-simplex geometry: points, Euclidean projection, sampling and
//! empirical occupancy measures.
//!
//! Actions are indexed `0..K` in the API. Files and CLI output use the
//! 1-based labels `1..=K`.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Sums further than this from one are rejected by [`SimplexPoint::new`].
pub const RENORMALIZE_TOLERANCE: f64 = 1e-9;

/// A probability vector over `K` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates `weights` and re-normalizes small floating-point drift.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("simplex point needs at least one entry"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!(
                "simplex entries must be finite and non-negative, got {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::invalid(format!("simplex entries sum to {total}, not 1")));
        }
        if (total - 1.0).abs() > 1e-12 {
            let weights = weights.into_iter().map(|w| w / total).collect();
            return Ok(SimplexPoint(weights));
        }
        Ok(SimplexPoint(weights))
    }

    /// Wraps weights that are already known to lie on the simplex.
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        debug_assert!(weights.iter().all(|w| *w >= 0.0));
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        SimplexPoint(weights)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1, "uniform point needs k >= 1");
        SimplexPoint(vec![1.0 / k as f64; k])
    }

    /// The vertex `e_action`.
    pub fn vertex(k: usize, action: usize) -> Self {
        assert!(action < k, "vertex {action} out of range for k = {k}");
        let mut w = vec![0.0; k];
        w[action] = 1.0;
        SimplexPoint(w)
    }

    /// Draws a point uniformly from the simplex (flat Dirichlet).
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let mut w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        SimplexPoint(w)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &SimplexPoint) -> f64 {
        squared_distance(&self.0, &other.0).sqrt()
    }
}

impl Index<usize> for SimplexPoint {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl AsRef<[f64]> for SimplexPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean projection of `v` onto the probability simplex.
pub fn project(v: &[f64]) -> Result<SimplexPoint> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("cannot project non-finite entry {x}")));
    }
    let mut out = v.to_vec();
    let mut scratch = Vec::with_capacity(v.len());
    project_in_place(&mut out, &mut scratch);
    Ok(SimplexPoint(out))
}

/// In-place projection used on hot paths. `v` must be finite.
///
/// Inputs already on the simplex (up to rounding) are returned untouched, so
/// the projection is exactly idempotent.
pub(crate) fn project_in_place(v: &mut [f64], scratch: &mut Vec<f64>) {
    let k = v.len();
    let total: f64 = v.iter().sum();
    let slack = 4.0 * f64::EPSILON * k as f64;
    if v.iter().all(|x| *x >= 0.0) && (total - 1.0).abs() <= slack {
        return;
    }
    let theta = threshold(v, scratch);
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// The sort-and-threshold level `theta` with `x_a = max(v_a - theta, 0)`.
fn threshold(v: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, u) in scratch.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta
}

/// Draws an action index in `0..K` with probability `p[a]`.
pub fn sample_action<R: Rng + ?Sized>(p: &SimplexPoint, rng: &mut R) -> usize {
    sample_index(&p.0, rng)
}

pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last_positive = a;
            if u < acc {
                return a;
            }
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last_positive
}

/// Action counts of a population of `N` players, an element of the grid of
/// empirical measures with denominator `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmpiricalMeasure {
    counts: Vec<usize>,
    n: usize,
}

impl EmpiricalMeasure {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if counts.is_empty() || n == 0 {
            return Err(Error::invalid("empirical measure needs at least one player"));
        }
        Ok(EmpiricalMeasure { counts, n })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn to_point(&self) -> SimplexPoint {
        SimplexPoint(counts_to_weights(&self.counts, self.n))
    }
}

pub(crate) fn counts_to_weights(counts: &[usize], n: usize) -> Vec<f64> {
    let n = n as f64;
    counts.iter().map(|c| *c as f64 / n).collect()
}

/// Occupancy measure of the given action profile.
pub fn empirical_measure(actions: &[usize], k: usize) -> Result<EmpiricalMeasure> {
    if actions.is_empty() {
        return Err(Error::invalid("empty action profile"));
    }
    let mut counts = vec![0usize; k];
    for &a in actions {
        if a >= k {
            return Err(Error::invalid(format!("action {a} out of range for {k} actions")));
        }
        counts[a] += 1;
    }
    Ok(EmpiricalMeasure {
        counts,
        n: actions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    /// Minimizes the distance over the 1e-3 mesh of the 3-action simplex.
    fn mesh_projection(v: &[f64; 3]) -> [f64; 3] {
        let mut best = [0.0; 3];
        let mut best_d = f64::INFINITY;
        for i in 0..=1000u32 {
            for j in 0..=(1000 - i) {
                let x = [i as f64 / 1e3, j as f64 / 1e3, (1000 - i - j) as f64 / 1e3];
                let d = squared_distance(&x, v);
                if d < best_d {
                    best_d = d;
                    best = x;
                }
            }
        }
        best
    }

    #[test]
    fn construction_renormalizes_drift_and_rejects_logic_errors() {
        let p = SimplexPoint::new(vec![0.5, 0.5 + 5e-10]).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexPoint::new(vec![f64::NAN, 1.0]).is_err());
        assert!(SimplexPoint::new(vec![]).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[0.3, 0.3, 0.4]).unwrap().weights(), &[0.3, 0.3, 0.4]);
        assert_eq!(project(&[2.0, 0.0, 0.0]).unwrap().weights(), &[1.0, 0.0, 0.0]);
        let p = project(&[0.8, 0.4, 0.4]).unwrap();
        assert_close(p.weights(), &[0.6, 0.2, 0.2], 1e-12);
        let mesh = mesh_projection(&[0.8, 0.4, 0.4]);
        assert_close(p.weights(), &mesh, 2e-3);
    }

    #[test]
    fn projection_of_zero_is_uniform() {
        let p = project(&[0.0; 4]).unwrap();
        assert_close(p.weights(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(matches!(project(&[1.0, f64::INFINITY]), Err(Error::InvalidArgument(_))));
        assert!(project(&[f64::NAN]).is_err());
    }

    #[test]
    fn projection_matches_mesh_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let v = [
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
            ];
            let p = project(&v).unwrap();
            assert_close(p.weights(), &mesh_projection(&v), 2e-3);
        }
    }

    #[test]
    fn projection_is_optimal_against_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in [2usize, 3, 5, 8] {
            for _ in 0..1000 {
                let v: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = project(&v).unwrap();
                let x = SimplexPoint::random(k, &mut rng);
                let dp = squared_distance(p.weights(), &v).sqrt();
                let dx = squared_distance(x.weights(), &v).sqrt();
                assert!(dp <= dx + 1e-9);
            }
        }
    }

    #[test]
    fn one_hot_sampling_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SimplexPoint::vertex(4, 1);
        assert!((0..1000).all(|_| sample_action(&p, &mut rng) == 1));
    }

    #[test]
    fn sampling_frequencies_concentrate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let half = SimplexPoint::uniform(2);
        let ones = (0..draws).filter(|_| sample_action(&half, &mut rng) == 0).count();
        assert!((ones as f64 / draws as f64 - 0.5).abs() <= 0.01);

        let five = SimplexPoint::uniform(5);
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[sample_action(&five, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.2).abs() <= 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_stream() {
        let p = SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<usize> = (0..100).map(|_| sample_action(&p, &mut a)).collect();
        let ys: Vec<usize> = (0..100).map(|_| sample_action(&p, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn empirical_measure_examples() {
        let m = empirical_measure(&[0, 0, 1], 2).unwrap();
        assert_eq!(m.counts(), &[2, 1]);
        assert_close(m.to_point().weights(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);

        let m = empirical_measure(&[2], 5).unwrap();
        assert_eq!(m.to_point(), SimplexPoint::vertex(5, 2));

        let m = empirical_measure(&[0, 1, 2, 3, 4], 5).unwrap();
        assert_close(m.to_point().weights(), &[0.2; 5], 1e-15);

        assert!(empirical_measure(&[0, 5], 5).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let p = project(&v).unwrap();
            let q = project(p.weights()).unwrap();
            prop_assert_eq!(p.weights(), q.weights());
        }

        #[test]
        fn projection_has_threshold_form(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let p = project(&v).unwrap();
            let (a, x) = p.weights().iter().enumerate().find(|(_, x)| **x > 0.0).unwrap();
            let theta = v[a] - x;
            for (va, xa) in v.iter().zip(p.weights()) {
                prop_assert!((xa - (va - theta).max(0.0)).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_is_non_expansive(
            pair in (2usize..7).prop_flat_map(|k| (
                prop::collection::vec(-3.0f64..3.0, k),
                prop::collection::vec(-3.0f64..3.0, k),
            ))
        ) {
            let (u, v) = pair;
            let pu = project(&u).unwrap();
            let pv = project(&v).unwrap();
            prop_assert!(pu.distance(&pv) <= squared_distance(&u, &v).sqrt() + 1e-12);
        }

        #[test]
        fn empirical_measure_lies_on_grid(actions in prop::collection::vec(0usize..4, 1..50)) {
            let m = empirical_measure(&actions, 4).unwrap();
            prop_assert_eq!(m.counts().iter().sum::<usize>(), actions.len());
            let p = m.to_point();
            prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for w in p.weights() {
                let scaled = w * actions.len() as f64;
                prop_assert!((scaled - scaled.round()).abs() <= 1e-9);
            }
        }
    }
}
