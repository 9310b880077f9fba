//! Regularized mean-field equilibria via the projected-ascent operator
//! `Γ(π) = Π((1 - ητ)π + η F(π))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::payoffs::{estimate_lipschitz, estimate_monotonicity, PayoffOperator};
use crate::simplex::{self, SimplexPoint};

/// Safety factor applied to sampled moduli when no exact value is known.
pub const ESTIMATE_SAFETY: f64 = 1.5;

const ESTIMATE_SAMPLES: usize = 10_000;
const ESTIMATE_SEED: u64 = 0x5eed_0f1a;

/// One regularized projected-ascent step with payoff signal `signal`.
pub fn trpa_step(pi: &SimplexPoint, signal: &[f64], eta: f64, tau: f64) -> Result<SimplexPoint> {
    if signal.len() != pi.k() {
        return Err(Error::DimensionMismatch {
            expected: pi.k(),
            found: signal.len(),
        });
    }
    if !(eta >= 0.0 && tau >= 0.0) || signal.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("trpa step needs eta >= 0, tau >= 0 and a finite signal"));
    }
    let mut w = pi.weights().to_vec();
    let mut scratch = Vec::with_capacity(w.len());
    trpa_step_in_place(&mut w, signal, eta, tau, &mut scratch);
    Ok(SimplexPoint::from_raw(w))
}

pub(crate) fn trpa_step_in_place(pi: &mut [f64], signal: &[f64], eta: f64, tau: f64, scratch: &mut Vec<f64>) {
    let keep = 1.0 - eta * tau;
    for (p, s) in pi.iter_mut().zip(signal) {
        *p = keep * *p + eta * s;
    }
    simplex::project_in_place(pi, scratch);
}

/// `sqrt(1 - 2(λ+τ)η + η²(L+τ)²)`, the Lipschitz constant of `Γ`.
pub fn contraction_modulus(lipschitz: f64, monotonicity: f64, tau: f64, eta: f64) -> f64 {
    let radicand = 1.0 - 2.0 * (monotonicity + tau) * eta + eta * eta * (lipschitz + tau).powi(2);
    radicand.max(0.0).sqrt()
}

/// The step minimizing [`contraction_modulus`]: `(λ+τ)/(L+τ)²`.
pub fn contraction_optimal_step(lipschitz: f64, monotonicity: f64, tau: f64) -> f64 {
    (monotonicity + tau) / (lipschitz + tau).powi(2)
}

/// Lipschitz and monotonicity moduli fed to the solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moduli {
    pub lipschitz: f64,
    pub monotonicity: f64,
    /// True when the moduli came from sampling rather than closed form.
    pub estimated: bool,
}

/// Exact moduli when the operator carries them, otherwise sampled estimates
/// widened by [`ESTIMATE_SAFETY`].
pub fn operator_moduli(op: &PayoffOperator) -> Moduli {
    match (op.lipschitz(), op.monotonicity()) {
        (Some(lipschitz), Some(monotonicity)) => Moduli {
            lipschitz,
            monotonicity,
            estimated: false,
        },
        (lipschitz, monotonicity) => {
            let mut rng = ChaCha8Rng::seed_from_u64(ESTIMATE_SEED);
            let lipschitz =
                lipschitz.unwrap_or_else(|| ESTIMATE_SAFETY * estimate_lipschitz(op, ESTIMATE_SAMPLES, &mut rng));
            let monotonicity = monotonicity
                .unwrap_or_else(|| estimate_monotonicity(op, ESTIMATE_SAMPLES, &mut rng).max(0.0) / ESTIMATE_SAFETY);
            Moduli {
                lipschitz,
                monotonicity,
                estimated: true,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    /// `(λ+τ)/(L+τ)²` from the operator moduli.
    ContractionOptimal,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub step: StepRule,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            step: StepRule::ContractionOptimal,
            tol: 1e-10,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizedSolution {
    pub pi_star: SimplexPoint,
    pub tau: f64,
    /// Equilibrium gap of `F - τI` at `pi_star`.
    pub gap: f64,
    pub iterations: usize,
    pub eta: f64,
}

/// Fixed-point iteration of `Γ` from the uniform policy until the
/// regularized gap drops to `tol`.
pub fn solve_mfne(op: &PayoffOperator, tau: f64, options: &SolverOptions) -> Result<RegularizedSolution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    let eta = match options.step {
        StepRule::ContractionOptimal => {
            let m = operator_moduli(op);
            contraction_optimal_step(m.lipschitz, m.monotonicity, tau)
        }
        StepRule::Constant(eta) => eta,
    };
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("solver step must be positive, got {eta}")));
    }
    let k = op.k();
    let mut pi = vec![1.0 / k as f64; k];
    let mut f = vec![0.0; k];
    let mut scratch = Vec::with_capacity(k);
    let mut gap = f64::INFINITY;
    for iteration in 0..=options.max_iter {
        op.eval_into(&pi, &mut f);
        gap = regularized_gap(&pi, &f, tau);
        if gap <= options.tol {
            return Ok(RegularizedSolution {
                pi_star: SimplexPoint::from_raw(pi),
                tau,
                gap,
                iterations: iteration,
                eta,
            });
        }
        if iteration == options.max_iter {
            break;
        }
        trpa_step_in_place(&mut pi, &f, eta, tau, &mut scratch);
    }
    Err(Error::NonConvergence {
        last: SimplexPoint::from_raw(pi),
        gap,
        iterations: options.max_iter,
    })
}

/// `max_a G(a) - π·G` with `G = F(π) - τπ`: the smallest `δ` for which `π`
/// is a `δ`-equilibrium of the regularized operator.
pub fn mfne_gap(op: &PayoffOperator, pi: &SimplexPoint, tau: f64) -> Result<f64> {
    let f = op.eval(pi)?;
    Ok(regularized_gap(pi.weights(), &f, tau))
}

fn regularized_gap(pi: &[f64], f: &[f64], tau: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut mean = 0.0;
    for (p, fa) in pi.iter().zip(f) {
        let g = fa - tau * p;
        best = best.max(g);
        mean += p * g;
    }
    (best - mean).max(0.0)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
