//! Payoff operators `F` mapping an occupancy measure over `K` actions to a
//! payoff per action.
//!
//! Every built-in operator is monotone in the payoff-maximization sense:
//! `(F(x) - F(y))·(x - y) <= -lambda ||x - y||²`. Each operator carries the
//! Lipschitz modulus `L` and monotonicity modulus `lambda` over the simplex
//! when they are known in closed form.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::simplex::SimplexPoint;

/// Ridge added to the sampled Wishart matrix.
pub const WISHART_RIDGE: f64 = 1e-3;

const STRUCTURE_TOLERANCE: f64 = 1e-10;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(
                "matrix rows must all have length equal to the row count",
            ));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Matrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    fn max_asymmetry(&self, sign: f64) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.get(i, j) - sign * self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `y = A x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, out) in y.iter_mut().enumerate() {
            *out = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// `F(mu) = scale * ((-S + X) mu + b) + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub s: Matrix,
    pub x: Matrix,
    pub b: Vec<f64>,
    pub scale: f64,
    pub shift: f64,
}

impl LinearParams {
    /// Checks that `s` is symmetric positive-definite and `x` antisymmetric.
    pub fn new(s: Matrix, x: Matrix, b: Vec<f64>) -> Result<Self> {
        let k = s.dim();
        if x.dim() != k || b.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: if x.dim() != k { x.dim() } else { b.len() },
            });
        }
        if s.max_asymmetry(1.0) > STRUCTURE_TOLERANCE {
            return Err(Error::invalid("S must be symmetric"));
        }
        if x.max_asymmetry(-1.0) > STRUCTURE_TOLERANCE {
            return Err(Error::invalid("X must be antisymmetric"));
        }
        let min_eig = SymmetricEigen::new(s.to_nalgebra()).eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(Error::invalid(format!(
                "S must be positive-definite (minimum eigenvalue {min_eig})"
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("b must be finite"));
        }
        Ok(LinearParams {
            s,
            x,
            b,
            scale: 1.0,
            shift: 0.0,
        })
    }

    /// The combined matrix `-S + X`.
    pub fn combined(&self) -> Matrix {
        let n = self.s.dim();
        let data = (0..n * n).map(|i| -self.s.data[i] + self.x.data[i]).collect();
        Matrix { n, data }
    }
}

/// Unconstrained affine map `F(mu) = M mu + b`; used for hand-built test
/// operators that need not be monotone.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub m: Matrix,
    pub b: Vec<f64>,
}

/// Negated gradient of `KL(gamma mu + (1 - gamma) mu_ref || mu_ref)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KlParams {
    pub mu_ref: SimplexPoint,
    pub gamma: f64,
}

impl KlParams {
    /// The gradient of the KL potential at `mu`, which is monotone in the
    /// ascending sense. The operator evaluates its negation.
    pub fn potential_gradient(&self, mu: &[f64]) -> Vec<f64> {
        let g = self.gamma;
        mu.iter()
            .zip(self.mu_ref.weights())
            .map(|(m, r)| g * ((g * m + (1.0 - g) * r) / r).ln() + g)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeachBarParams {
    pub alpha: f64,
    /// 1-based location label `floor(K / 2)`.
    pub bar: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionParams {
    pub alphas: Vec<f64>,
    pub n: usize,
}

impl CollisionParams {
    pub fn payoff(&self, action: usize, x: f64) -> f64 {
        let n = self.n as f64;
        let alpha = self.alphas[action];
        if x <= 1.0 / n {
            alpha
        } else if x >= 2.0 / n {
            0.0
        } else {
            alpha * n * (2.0 / n - x)
        }
    }
}

/// Per-action non-increasing piecewise-linear payoff curves.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTableParams {
    curves: Vec<Vec<(f64, f64)>>,
}

impl CurveTableParams {
    /// Each curve is a list of `(occupancy, payoff)` knots starting at
    /// occupancy 0 and ending at 1, strictly increasing in occupancy and
    /// non-increasing in payoff.
    pub fn new(curves: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::invalid("curve table needs at least one action"));
        }
        for (a, knots) in curves.iter().enumerate() {
            let label = a + 1;
            if knots.len() < 2 {
                return Err(Error::invalid(format!("action {label}: need at least two knots")));
            }
            if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::invalid(format!("action {label}: non-finite knot")));
            }
            if knots[0].0 != 0.0 || knots[knots.len() - 1].0 != 1.0 {
                return Err(Error::invalid(format!(
                    "action {label}: occupancies must start at 0 and end at 1"
                )));
            }
            for w in knots.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(Error::invalid(format!(
                        "action {label}: occupancies must be strictly increasing"
                    )));
                }
                if w[1].1 > w[0].1 {
                    return Err(Error::invalid(format!(
                        "action {label}: payoffs must be non-increasing"
                    )));
                }
            }
        }
        Ok(CurveTableParams { curves })
    }

    /// Reads `action,occupancy,payoff` rows with 1-based action labels.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["action", "occupancy", "payoff"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::invalid(format!(
                "curve table header must be `action,occupancy,payoff`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut curves: Vec<Vec<(f64, f64)>> = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |i: usize| -> Result<&str> {
                record
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("row {}: missing field", line + 2)))
            };
            let action: usize = field(0)?
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad action label", line + 2)))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::invalid(format!("row {}: bad number `{s}`", line + 2)))
            };
            let occupancy = parse(field(1)?)?;
            let payoff = parse(field(2)?)?;
            if action == 0 {
                return Err(Error::invalid(format!("row {}: actions are labelled from 1", line + 2)));
            }
            if action < curves.len() {
                return Err(Error::invalid(format!(
                    "row {}: rows must be sorted by action",
                    line + 2
                )));
            }
            if action > curves.len() + 1 {
                return Err(Error::invalid(format!(
                    "row {}: action {} has no knots",
                    line + 2,
                    curves.len() + 1
                )));
            }
            if action == curves.len() + 1 {
                curves.push(Vec::new());
            }
            curves[action - 1].push((occupancy, payoff));
        }
        Self::new(curves)
    }

    pub fn curves(&self) -> &[Vec<(f64, f64)>] {
        &self.curves
    }

    pub fn payoff(&self, action: usize, x: f64) -> f64 {
        let knots = &self.curves[action];
        let x = x.clamp(0.0, 1.0);
        let upper = knots.partition_point(|(occ, _)| *occ < x).clamp(1, knots.len() - 1);
        let (x0, y0) = knots[upper - 1];
        let (x1, y1) = knots[upper];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    fn slopes(&self) -> impl Iterator<Item = f64> + '_ {
        self.curves
            .iter()
            .flat_map(|knots| knots.windows(2).map(|w| (w[0].1 - w[1].1) / (w[1].0 - w[0].0)))
    }
}

type CustomFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A user-supplied operator without closed-form moduli.
#[derive(Clone)]
pub struct CustomParams {
    pub name: String,
    f: Arc<CustomFn>,
}

impl fmt::Debug for CustomParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomParams").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug)]
pub enum PayoffKind {
    Linear(LinearParams),
    Affine(AffineParams),
    Kl(KlParams),
    BeachBar(BeachBarParams),
    Collision(CollisionParams),
    CurveTable(CurveTableParams),
    Custom(CustomParams),
}

impl PayoffKind {
    pub fn name(&self) -> &str {
        match self {
            PayoffKind::Linear(_) => "linear",
            PayoffKind::Affine(_) => "affine",
            PayoffKind::Kl(_) => "kl",
            PayoffKind::BeachBar(_) => "beach_bar",
            PayoffKind::Collision(_) => "collision",
            PayoffKind::CurveTable(_) => "curve_table",
            PayoffKind::Custom(c) => &c.name,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PayoffOperator {
    kind: PayoffKind,
    k: usize,
    declared_range: (f64, f64),
    lipschitz: Option<f64>,
    monotonicity: Option<f64>,
    // -S + X (scaled) for the linear families
    matrix: Option<Matrix>,
}

impl PayoffOperator {
    pub fn kind(&self) -> &PayoffKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn declared_range(&self) -> (f64, f64) {
        self.declared_range
    }

    /// Exact Lipschitz modulus over the simplex, when known.
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    /// Exact monotonicity modulus `lambda` over the simplex, when known.
    /// Negative values mean the operator is not monotone.
    pub fn monotonicity(&self) -> Option<f64> {
        self.monotonicity
    }

    pub fn eval(&self, mu: &SimplexPoint) -> Result<Vec<f64>> {
        if mu.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: mu.k(),
            });
        }
        let mut out = vec![0.0; self.k];
        self.eval_into(mu.weights(), &mut out);
        Ok(out)
    }

    /// Unchecked evaluation on raw weights; `mu` need not be normalized
    /// exactly but must have `K` entries.
    pub fn eval_into(&self, mu: &[f64], out: &mut [f64]) {
        debug_assert_eq!(mu.len(), self.k);
        match &self.kind {
            PayoffKind::Linear(p) => {
                self.matrix.as_ref().expect("linear matrix").apply(mu, out);
                for (o, b) in out.iter_mut().zip(&p.b) {
                    *o += p.scale * b + p.shift;
                }
            }
            PayoffKind::Affine(p) => {
                p.m.apply(mu, out);
                for (o, b) in out.iter_mut().zip(&p.b) {
                    *o += b;
                }
            }
            PayoffKind::Kl(p) => {
                let g = p.gamma;
                for ((o, m), r) in out.iter_mut().zip(mu).zip(p.mu_ref.weights()) {
                    *o = -(g * ((g * m + (1.0 - g) * r) / r).ln() + g);
                }
            }
            PayoffKind::BeachBar(p) => {
                let k = self.k as f64;
                for (a, (o, m)) in out.iter_mut().zip(mu).enumerate() {
                    let distance = (a as f64 + 1.0 - p.bar as f64).abs();
                    *o = 1.0 - distance / k - p.alpha * m.ln_1p();
                }
            }
            PayoffKind::Collision(p) => {
                for (a, (o, m)) in out.iter_mut().zip(mu).enumerate() {
                    *o = p.payoff(a, *m);
                }
            }
            PayoffKind::CurveTable(p) => {
                for (a, (o, m)) in out.iter_mut().zip(mu).enumerate() {
                    *o = p.payoff(a, *m);
                }
            }
            PayoffKind::Custom(p) => (p.f)(mu, out),
        }
    }

    /// Linear operator `(-S + X) mu + b`, optionally rescaled affinely so that
    /// its outputs over the simplex span exactly `[0, 1]`.
    pub fn linear(mut params: LinearParams, normalize: bool) -> Self {
        let k = params.s.dim();
        let raw = params.combined();
        let (lo, hi) = affine_range(&raw, &params.b);
        if normalize && hi > lo {
            params.scale = 1.0 / (hi - lo);
            params.shift = -lo * params.scale;
        }
        let scale = params.scale;
        let declared_range = (scale * lo + params.shift, scale * hi + params.shift);
        let (lipschitz, monotonicity) = tangent_moduli(&raw);
        let matrix = Matrix {
            n: k,
            data: raw.data.iter().map(|v| v * scale).collect(),
        };
        PayoffOperator {
            kind: PayoffKind::Linear(params),
            k,
            declared_range,
            lipschitz: Some(lipschitz * scale),
            monotonicity: Some(monotonicity * scale),
            matrix: Some(matrix),
        }
    }

    pub fn affine(m: Matrix, b: Vec<f64>) -> Result<Self> {
        let k = m.dim();
        if b.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: b.len(),
            });
        }
        if k == 0 {
            return Err(Error::invalid("operator needs at least one action"));
        }
        let declared_range = affine_range(&m, &b);
        let (lipschitz, monotonicity) = tangent_moduli(&m);
        Ok(PayoffOperator {
            kind: PayoffKind::Affine(AffineParams { m, b }),
            k,
            declared_range,
            lipschitz: Some(lipschitz),
            monotonicity: Some(monotonicity),
            matrix: None,
        })
    }

    /// The constant operator `F = c`.
    pub fn constant(c: Vec<f64>) -> Result<Self> {
        Self::affine(Matrix::zeros(c.len()), c)
    }

    pub fn custom<F>(name: &str, k: usize, declared_range: (f64, f64), f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        PayoffOperator {
            kind: PayoffKind::Custom(CustomParams {
                name: name.to_string(),
                f: Arc::new(f),
            }),
            k,
            declared_range,
            lipschitz: None,
            monotonicity: None,
            matrix: None,
        }
    }
}

/// Samples `S = AᵀA + ridge·I`, `X = (U - Uᵀ)/2`, `b ~ U[0,1]^K`.
pub fn make_linear<R: Rng + ?Sized>(k: usize, rng: &mut R, normalize: bool) -> Result<PayoffOperator> {
    if k < 2 {
        return Err(Error::invalid("linear operator needs K >= 2"));
    }
    let a: Vec<f64> = (0..k * k).map(|_| StandardNormal.sample(rng)).collect();
    let u: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let mut s = vec![0.0; k * k];
    let mut x = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            s[i * k + j] = (0..k).map(|r| a[r * k + i] * a[r * k + j]).sum::<f64>();
            x[i * k + j] = (u[i * k + j] - u[j * k + i]) / 2.0;
        }
        s[i * k + i] += WISHART_RIDGE;
    }
    // symmetrize exactly against summation-order rounding
    for i in 0..k {
        for j in 0..i {
            s[i * k + j] = s[j * k + i];
        }
    }
    let params = LinearParams::new(Matrix { n: k, data: s }, Matrix { n: k, data: x }, b)?;
    Ok(PayoffOperator::linear(params, normalize))
}

pub fn make_kl(mu_ref: SimplexPoint, gamma: f64) -> Result<PayoffOperator> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if mu_ref.weights().iter().any(|r| *r <= 0.0) {
        return Err(Error::invalid("reference distribution must have full support"));
    }
    let g = gamma;
    let k = mu_ref.k();
    let slope = |r: f64, m: f64| g * g / (g * m + (1.0 - g) * r);
    let lipschitz = mu_ref.weights().iter().map(|r| slope(*r, 0.0)).fold(0.0, f64::max);
    let monotonicity = mu_ref
        .weights()
        .iter()
        .map(|r| slope(*r, 1.0))
        .fold(f64::INFINITY, f64::min);
    let params = KlParams { mu_ref, gamma };
    let at_zero = params.potential_gradient(&vec![0.0; k]);
    let at_one = params.potential_gradient(&vec![1.0; k]);
    let hi = -at_zero.iter().cloned().fold(f64::INFINITY, f64::min);
    let lo = -at_one.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PayoffOperator {
        kind: PayoffKind::Kl(params),
        k,
        declared_range: (lo, hi),
        lipschitz: Some(lipschitz),
        monotonicity: Some(monotonicity),
        matrix: None,
    })
}

pub fn make_beach_bar(k: usize, alpha: f64) -> Result<PayoffOperator> {
    if k < 2 {
        return Err(Error::invalid("beach bar needs K >= 2"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let bar = k / 2;
    let kf = k as f64;
    let farthest = (1..=k).map(|a| a.abs_diff(bar)).max().unwrap_or(0) as f64;
    let nearest = (1..=k).map(|a| a.abs_diff(bar)).min().unwrap_or(0) as f64;
    let declared_range = (1.0 - farthest / kf - alpha * std::f64::consts::LN_2, 1.0 - nearest / kf);
    Ok(PayoffOperator {
        kind: PayoffKind::BeachBar(BeachBarParams { alpha, bar }),
        k,
        declared_range,
        // d/dx alpha ln(1 + x) ranges over [alpha / 2, alpha] on [0, 1]
        lipschitz: Some(alpha),
        monotonicity: Some(alpha / 2.0),
        matrix: None,
    })
}

pub fn make_collision(alphas: Vec<f64>, n: usize) -> Result<PayoffOperator> {
    if n < 2 {
        return Err(Error::invalid("collision operator needs N >= 2"));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid("collision payoffs must lie in [0, 1]"));
    }
    let max_alpha = alphas.iter().cloned().fold(0.0, f64::max);
    Ok(PayoffOperator {
        k: alphas.len(),
        declared_range: (0.0, max_alpha),
        lipschitz: Some(n as f64 * max_alpha),
        monotonicity: Some(0.0),
        kind: PayoffKind::Collision(CollisionParams { alphas, n }),
        matrix: None,
    })
}

pub fn make_curve_table(curves: CurveTableParams) -> PayoffOperator {
    let lipschitz = curves.slopes().fold(0.0, f64::max);
    let monotonicity = curves.slopes().fold(f64::INFINITY, f64::min);
    let lo = curves
        .curves
        .iter()
        .flat_map(|c| c.iter().map(|(_, y)| *y))
        .fold(f64::INFINITY, f64::min);
    let hi = curves
        .curves
        .iter()
        .flat_map(|c| c.iter().map(|(_, y)| *y))
        .fold(f64::NEG_INFINITY, f64::max);
    PayoffOperator {
        k: curves.curves.len(),
        declared_range: (lo, hi),
        lipschitz: Some(lipschitz),
        monotonicity: Some(monotonicity),
        kind: PayoffKind::CurveTable(curves),
        matrix: None,
    }
}

/// Range of `M mu + b` over the simplex: min/max over vertices.
fn affine_range(m: &Matrix, b: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, bi) in b.iter().enumerate() {
        for v in m.row(i) {
            lo = lo.min(v + bi);
            hi = hi.max(v + bi);
        }
    }
    (lo, hi)
}

/// Orthonormal basis of the sum-zero subspace, as a `K x (K-1)` matrix.
fn tangent_basis(k: usize) -> DMatrix<f64> {
    let mut spanning = DMatrix::zeros(k, k - 1);
    for j in 0..k - 1 {
        spanning[(j, j)] = 1.0;
        spanning[(k - 1, j)] = -1.0;
    }
    spanning.qr().q()
}

/// Lipschitz and monotonicity moduli of `mu -> M mu` restricted to
/// differences of simplex points.
fn tangent_moduli(m: &Matrix) -> (f64, f64) {
    let k = m.dim();
    if k < 2 {
        return (0.0, 0.0);
    }
    let q = tangent_basis(k);
    let m = m.to_nalgebra();
    let lipschitz = (&m * &q).singular_values().max();
    let symmetric = (&m + m.transpose()) * -0.5;
    let restricted = q.transpose() * symmetric * &q;
    let monotonicity = SymmetricEigen::new(restricted).eigenvalues.min();
    (lipschitz, monotonicity)
}

fn sample_pair<R: Rng + ?Sized>(k: usize, rng: &mut R) -> (SimplexPoint, SimplexPoint) {
    (SimplexPoint::random(k, rng), SimplexPoint::random(k, rng))
}

/// Largest observed `||F(x) - F(y)|| / ||x - y||` over `n_samples` random
/// pairs: a lower bound on the Lipschitz modulus.
pub fn estimate_lipschitz<R: Rng + ?Sized>(op: &PayoffOperator, n_samples: usize, rng: &mut R) -> f64 {
    let k = op.k();
    let mut fx = vec![0.0; k];
    let mut fy = vec![0.0; k];
    let mut best = 0.0f64;
    for _ in 0..n_samples {
        let (x, y) = sample_pair(k, rng);
        let dx = crate::simplex::squared_distance(x.weights(), y.weights()).sqrt();
        if dx < 1e-12 {
            continue;
        }
        op.eval_into(x.weights(), &mut fx);
        op.eval_into(y.weights(), &mut fy);
        let df = crate::simplex::squared_distance(&fx, &fy).sqrt();
        best = best.max(df / dx);
    }
    best
}

/// Smallest observed `-(F(x) - F(y))·(x - y) / ||x - y||²` over
/// `n_samples` random pairs. Non-negative values mean no sampled pair
/// violates monotonicity; the result upper-bounds the true modulus.
pub fn estimate_monotonicity<R: Rng + ?Sized>(op: &PayoffOperator, n_samples: usize, rng: &mut R) -> f64 {
    let k = op.k();
    let mut fx = vec![0.0; k];
    let mut fy = vec![0.0; k];
    let mut best = f64::INFINITY;
    for _ in 0..n_samples {
        let (x, y) = sample_pair(k, rng);
        let d2 = crate::simplex::squared_distance(x.weights(), y.weights());
        if d2 < 1e-24 {
            continue;
        }
        op.eval_into(x.weights(), &mut fx);
        op.eval_into(y.weights(), &mut fy);
        let inner: f64 = fx
            .iter()
            .zip(&fy)
            .zip(x.weights().iter().zip(y.weights()))
            .map(|((a, b), (p, q))| (a - b) * (p - q))
            .sum();
        best = best.min(-inner / d2);
    }
    if best.is_infinite() {
        0.0
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn point(w: &[f64]) -> SimplexPoint {
        SimplexPoint::new(w.to_vec()).unwrap()
    }

    fn negative_identity(k: usize) -> PayoffOperator {
        let s = Matrix::identity(k);
        let params = LinearParams::new(s, Matrix::zeros(k), vec![0.0; k]).unwrap();
        PayoffOperator::linear(params, false)
    }

    fn positive_identity(k: usize) -> PayoffOperator {
        PayoffOperator::affine(Matrix::identity(k), vec![0.0; k]).unwrap()
    }

    /// Largest singular value by power iteration on `MᵀM`.
    fn power_iteration_norm(m: &Matrix) -> f64 {
        let k = m.dim();
        let mut v = vec![1.0; k];
        let mut w = vec![0.0; k];
        for _ in 0..5000 {
            m.apply(&v, &mut w);
            let mut u = vec![0.0; k];
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = (0..k).map(|i| m.get(i, j) * w[i]).sum();
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = u.into_iter().map(|x| x / norm).collect();
        }
        m.apply(&v, &mut w);
        w.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_range(op: &PayoffOperator, samples: usize, seed: u64) {
        let mut r = rng(seed);
        let (lo, hi) = op.declared_range();
        let mut out = vec![0.0; op.k()];
        for _ in 0..samples {
            let mu = SimplexPoint::random(op.k(), &mut r);
            op.eval_into(mu.weights(), &mut out);
            for v in &out {
                assert!(v.is_finite());
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let op = make_beach_bar(5, 1.0).unwrap();
        assert!(matches!(
            op.eval(&SimplexPoint::uniform(4)),
            Err(Error::DimensionMismatch { expected: 5, found: 4 })
        ));
    }

    #[test]
    fn linear_negative_identity_example() {
        let op = negative_identity(2);
        assert_eq!(op.eval(&point(&[1.0, 0.0])).unwrap(), vec![-1.0, 0.0]);
        assert!((op.lipschitz().unwrap() - 1.0).abs() < 1e-12);
        assert!((op.monotonicity().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_params_validate_structure() {
        let not_sym = Matrix::from_rows(vec![vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(LinearParams::new(not_sym, Matrix::zeros(2), vec![0.0; 2]).is_err());
        let not_pd = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(LinearParams::new(not_pd, Matrix::zeros(2), vec![0.0; 2]).is_err());
        let not_anti = Matrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(LinearParams::new(Matrix::identity(2), not_anti, vec![0.0; 2]).is_err());
    }

    #[test]
    fn sampled_linear_is_monotone_with_declared_modulus() {
        let mut r = rng(1);
        for k in [2usize, 3, 5] {
            let op = make_linear(k, &mut r, true).unwrap();
            let lambda = op.monotonicity().unwrap();
            assert!(lambda > 0.0);
            let mut fx = vec![0.0; k];
            let mut fy = vec![0.0; k];
            for _ in 0..10_000 {
                let x = SimplexPoint::random(k, &mut r);
                let y = SimplexPoint::random(k, &mut r);
                op.eval_into(x.weights(), &mut fx);
                op.eval_into(y.weights(), &mut fy);
                let d2 = crate::simplex::squared_distance(x.weights(), y.weights());
                let inner: f64 = (0..k).map(|a| (fx[a] - fy[a]) * (x[a] - y[a])).sum();
                assert!(inner <= -lambda * d2 + 1e-12);
            }
        }
    }

    #[test]
    fn antisymmetric_part_contributes_nothing() {
        let mut r = rng(2);
        let op = make_linear(5, &mut r, false).unwrap();
        let PayoffKind::Linear(p) = op.kind() else {
            unreachable!()
        };
        let mut xd = vec![0.0; 5];
        for _ in 0..1000 {
            let x = SimplexPoint::random(5, &mut r);
            let y = SimplexPoint::random(5, &mut r);
            let d: Vec<f64> = (0..5).map(|a| x[a] - y[a]).collect();
            p.x.apply(&d, &mut xd);
            let contribution: f64 = xd.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!(contribution.abs() <= 1e-10);
        }
    }

    #[test]
    fn normalized_linear_outputs_lie_in_unit_interval() {
        let mut r = rng(3);
        let op = make_linear(5, &mut r, true).unwrap();
        let (lo, hi) = op.declared_range();
        assert!((lo - 0.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        check_range(&op, 10_000, 4);
    }

    #[test]
    fn lipschitz_estimate_brackets_spectral_norm() {
        let mut r = rng(5);
        let op = make_linear(4, &mut r, false).unwrap();
        let PayoffKind::Linear(p) = op.kind() else {
            unreachable!()
        };
        let full = power_iteration_norm(&p.combined());
        let est = estimate_lipschitz(&op, 10_000, &mut r);
        assert!(est <= full + 1e-9);
        assert!(est <= op.lipschitz().unwrap() + 1e-9);
        assert!(est >= 0.5 * op.lipschitz().unwrap());
        assert!(op.lipschitz().unwrap() <= full + 1e-9);
    }

    #[test]
    fn estimates_on_reference_operators() {
        let mut r = rng(6);
        let neg = negative_identity(3);
        assert!((estimate_lipschitz(&neg, 500, &mut r) - 1.0).abs() < 1e-9);
        assert!((estimate_monotonicity(&neg, 500, &mut r) - 1.0).abs() < 1e-9);

        let constant = PayoffOperator::constant(vec![0.3, 0.7, 0.1]).unwrap();
        assert_eq!(estimate_lipschitz(&constant, 500, &mut r), 0.0);
        assert_eq!(estimate_monotonicity(&constant, 500, &mut r), 0.0);

        let pos = positive_identity(3);
        assert!((estimate_monotonicity(&pos, 500, &mut r) + 1.0).abs() < 1e-9);
        assert!(pos.monotonicity().unwrap() < 0.0);
    }

    #[test]
    fn kl_examples() {
        let mu_ref = point(&[0.5, 0.5]);
        let op = make_kl(mu_ref.clone(), 0.1).unwrap();
        let PayoffKind::Kl(p) = op.kind() else { unreachable!() };
        for g in p.potential_gradient(mu_ref.weights()) {
            assert!((g - 0.1).abs() < 1e-15);
        }
        let grad = p.potential_gradient(&[1.0, 0.0]);
        assert!((grad[0] - (0.1 * 1.1f64.ln() + 0.1)).abs() < 1e-15);
        assert!((grad[0] - 0.109531).abs() < 1e-6);
        // the operator is the negated gradient
        assert_eq!(op.eval(&mu_ref).unwrap(), vec![-0.1, -0.1]);
        assert!((op.eval(&point(&[1.0, 0.0])).unwrap()[0] + 0.109531).abs() < 1e-6);
    }

    #[test]
    fn kl_is_monotone_in_payoff_sense() {
        let mut r = rng(7);
        let mu_ref = SimplexPoint::random(5, &mut r);
        let op = make_kl(mu_ref, 0.1).unwrap();
        let est = estimate_monotonicity(&op, 10_000, &mut r);
        assert!(est >= op.monotonicity().unwrap() - 1e-12);
        assert!(est > 0.0);
        assert!(estimate_lipschitz(&op, 10_000, &mut r) <= op.lipschitz().unwrap() + 1e-9);
        check_range(&op, 10_000, 8);
    }

    #[test]
    fn kl_rejects_bad_parameters() {
        assert!(make_kl(point(&[1.0, 0.0]), 0.1).is_err());
        assert!(make_kl(point(&[0.5, 0.5]), 0.0).is_err());
        assert!(make_kl(point(&[0.5, 0.5]), 1.0).is_err());
    }

    #[test]
    fn beach_bar_examples() {
        let op = make_beach_bar(5, 1.0).unwrap();
        let f = op.eval(&SimplexPoint::uniform(5)).unwrap();
        // labels 2 and 4 are indices 1 and 3
        assert!((f[1] - (1.0 - 1.2f64.ln())).abs() < 1e-12);
        assert!((f[1] - 0.817678).abs() < 1e-6);
        assert!((f[3] - 0.417678).abs() < 1e-6);
        let f = op.eval(&SimplexPoint::vertex(5, 1)).unwrap();
        assert!((f[1] - 0.306853).abs() < 1e-6);
        // payoffs can leave [0, 1] at the far corner
        let f = op.eval(&SimplexPoint::vertex(5, 4)).unwrap();
        assert!((f[4] - (0.4 - 2f64.ln())).abs() < 1e-12);
        assert!(op.declared_range().0 <= f[4]);
        check_range(&op, 10_000, 9);
    }

    #[test]
    fn beach_bar_without_congestion_is_constant() {
        let op = make_beach_bar(5, 0.0).unwrap();
        let mut r = rng(10);
        let a = op.eval(&SimplexPoint::random(5, &mut r)).unwrap();
        let b = op.eval(&SimplexPoint::vertex(5, 1)).unwrap();
        assert_eq!(a, b);
        // the bar location itself is the unique best action
        assert_eq!(a.iter().cloned().fold(f64::MIN, f64::max), a[1]);
    }

    #[test]
    fn beach_bar_is_strongly_monotone() {
        let op = make_beach_bar(5, 1.0).unwrap();
        let mut r = rng(11);
        let est = estimate_monotonicity(&op, 10_000, &mut r);
        assert!(est >= 0.0);
        assert!(est >= op.monotonicity().unwrap() - 1e-12);
        assert!(estimate_lipschitz(&op, 10_000, &mut r) <= op.lipschitz().unwrap() + 1e-9);
    }

    #[test]
    fn collision_examples() {
        let op = make_collision(vec![0.9, 1.0], 10).unwrap();
        let PayoffKind::Collision(p) = op.kind() else {
            unreachable!()
        };
        assert_eq!(p.payoff(0, 0.05), 0.9);
        assert!((p.payoff(0, 0.15) - 0.45).abs() < 1e-12);
        assert_eq!(p.payoff(0, 0.25), 0.0);
        assert_eq!(p.payoff(0, 0.1), 0.9);
        assert_eq!(p.payoff(0, 0.2), 0.0);
        assert!((p.payoff(1, 0.15) - 0.5).abs() < 1e-12);
        let mut r = rng(12);
        assert!(estimate_lipschitz(&op, 10_000, &mut r) <= 10.0 + 1e-9);
        assert!(estimate_monotonicity(&op, 10_000, &mut r) >= -1e-12);
        check_range(&op, 1000, 13);
    }

    #[test]
    fn curve_table_examples() {
        let line = CurveTableParams::new(vec![vec![(0.0, 1.0), (1.0, 0.0)]]).unwrap();
        assert!((line.payoff(0, 0.3) - 0.7).abs() < 1e-15);

        let flat = make_curve_table(
            CurveTableParams::new(vec![
                vec![(0.0, 0.4), (1.0, 0.4)],
                vec![(0.0, 0.2), (0.5, 0.2), (1.0, 0.2)],
            ])
            .unwrap(),
        );
        let mut r = rng(14);
        assert_eq!(estimate_monotonicity(&flat, 1000, &mut r), 0.0);
        assert_eq!(flat.monotonicity(), Some(0.0));

        // every secant slope is at least 0.5
        let steep = make_curve_table(
            CurveTableParams::new(vec![
                vec![(0.0, 1.0), (0.5, 0.75), (1.0, 0.0)],
                vec![(0.0, 0.9), (0.3, 0.6), (1.0, 0.25)],
                vec![(0.0, 0.8), (1.0, 0.3)],
            ])
            .unwrap(),
        );
        assert_eq!(steep.monotonicity(), Some(0.5));
        assert!(estimate_monotonicity(&steep, 10_000, &mut r) >= 0.5 - 1e-6);
        check_range(&steep, 1000, 15);
    }

    #[test]
    fn curve_table_rejects_malformed_knots() {
        assert!(CurveTableParams::new(vec![vec![(0.1, 1.0), (1.0, 0.0)]]).is_err());
        assert!(CurveTableParams::new(vec![vec![(0.0, 1.0), (0.9, 0.0)]]).is_err());
        assert!(CurveTableParams::new(vec![vec![(0.0, 0.0), (1.0, 1.0)]]).is_err());
        assert!(CurveTableParams::new(vec![vec![(0.0, 1.0), (0.5, 0.5), (0.5, 0.4), (1.0, 0.0)]]).is_err());
        assert!(CurveTableParams::new(vec![vec![(0.0, 1.0)]]).is_err());
    }

    #[test]
    fn curve_table_from_csv() {
        let text = "action,occupancy,payoff\n1,0,0.8\n1,1,-0.2\n2,0,0.6\n2,0.5,0.1\n2,1,-0.4\n";
        let table = CurveTableParams::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(table.curves().len(), 2);
        assert!((table.payoff(1, 0.25) - 0.35).abs() < 1e-15);

        let unsorted = "action,occupancy,payoff\n2,0,1\n2,1,0\n1,0,1\n1,1,0\n";
        assert!(CurveTableParams::from_csv_reader(unsorted.as_bytes()).is_err());
        let bad_header = "a,x,y\n1,0,1\n1,1,0\n";
        assert!(CurveTableParams::from_csv_reader(bad_header.as_bytes()).is_err());
        let missing_end = "action,occupancy,payoff\n1,0,1\n1,0.5,0\n";
        assert!(CurveTableParams::from_csv_reader(missing_end.as_bytes()).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut r = rng(16);
        let op = make_linear(3, &mut r, true).unwrap();
        let mu = SimplexPoint::random(3, &mut r);
        assert_eq!(op.eval(&mu).unwrap(), op.eval(&mu).unwrap());
    }

    #[test]
    fn custom_operator_has_no_moduli() {
        let op = PayoffOperator::custom("neg", 2, (-1.0, 0.0), |mu, out| {
            for (o, m) in out.iter_mut().zip(mu) {
                *o = -m;
            }
        });
        assert_eq!(op.lipschitz(), None);
        assert_eq!(op.eval(&point(&[0.25, 0.75])).unwrap(), vec![-0.25, -0.75]);
    }
}
