//! Expected payoffs, exploitability and population diagnostics for an
//! `N`-player profile.
//!
//! Everything is built on the deviation payoff vector of an agent `i`:
//! `g(a) = E[F(μ̂)(a)]` when `i` plays `a` and every opponent `j` draws from
//! `π^j`. The expected payoff of a mixed policy `π'` is then `π'·g`, and the
//! exploitability is `max_a g(a) - π^i·g`.

use rand::Rng;
use rayon::prelude::*;

use crate::equilibrium::argmax;
use crate::error::{Error, Result};
use crate::payoffs::PayoffOperator;
use crate::simplex::{sample_index, squared_distance, SimplexPoint};

pub const DEFAULT_MC_SAMPLES: usize = 2000;

/// Largest number of opponent action profiles enumerated exactly.
pub const PROFILE_BUDGET: f64 = 1e6;

/// Largest number of opponent count compositions enumerated exactly when
/// all opponents share a policy.
pub const COMPOSITION_BUDGET: f64 = 5e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Exact,
    MonteCarlo {
        samples: usize,
    },
    /// Exact when within budget, Monte Carlo otherwise.
    Auto {
        samples: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolvedMethod {
    ExactEnumeration,
    MonteCarlo,
}

impl ResolvedMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ResolvedMethod::ExactEnumeration => "exact",
            ResolvedMethod::MonteCarlo => "mc",
        }
    }
}

/// A value with its Monte Carlo standard error (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// `g(a)` for every action, with the sample covariance under Monte Carlo.
#[derive(Clone, Debug)]
struct DeviationPayoffs {
    mean: Vec<f64>,
    // row-major K x K covariance of one sample, absent when exact
    covariance: Option<Vec<f64>>,
    samples: usize,
}

impl DeviationPayoffs {
    fn functional(&self, w: &[f64]) -> Estimate {
        let value = w.iter().zip(&self.mean).map(|(a, b)| a * b).sum();
        let std_error = match &self.covariance {
            None => 0.0,
            Some(c) => {
                let k = w.len();
                let mut var = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        var += w[a] * w[b] * c[a * k + b];
                    }
                }
                (var.max(0.0) / self.samples as f64).sqrt()
            }
        };
        Estimate { value, std_error }
    }

    fn exploitability(&self, policy: &SimplexPoint) -> Estimate {
        let best = argmax(&self.mean);
        let mut w: Vec<f64> = policy.weights().iter().map(|p| -p).collect();
        w[best] += 1.0;
        let e = self.functional(&w);
        Estimate {
            value: e.value.max(0.0),
            std_error: e.std_error,
        }
    }
}

fn validate_profile(op: &PayoffOperator, policies: &[SimplexPoint], i: usize) -> Result<()> {
    if policies.is_empty() {
        return Err(Error::invalid("empty policy profile"));
    }
    if i >= policies.len() {
        return Err(Error::invalid(format!(
            "agent {i} out of range for {} agents",
            policies.len()
        )));
    }
    if let Some(p) = policies.iter().find(|p| p.k() != op.k()) {
        return Err(Error::DimensionMismatch {
            expected: op.k(),
            found: p.k(),
        });
    }
    Ok(())
}

fn opponents_identical(policies: &[SimplexPoint], i: usize) -> bool {
    let mut others = policies.iter().enumerate().filter(|(j, _)| *j != i);
    match others.next() {
        None => true,
        Some((_, first)) => others.all(|(_, p)| p == first),
    }
}

fn compositions_count(m: usize, k: usize) -> f64 {
    // C(m + k - 1, k - 1)
    let mut c = 1.0f64;
    for j in 1..k {
        c *= (m + j) as f64 / j as f64;
    }
    c
}

fn profile_count(m: usize, k: usize) -> f64 {
    (k as f64).powi(m as i32)
}

/// Work needed to evaluate agent `i` exactly, or a budget error.
fn exact_plan(policies: &[SimplexPoint], i: usize, k: usize) -> Result<bool> {
    let m = policies.len() - 1;
    if opponents_identical(policies, i) {
        let required = compositions_count(m, k);
        if required <= COMPOSITION_BUDGET {
            return Ok(true);
        }
    }
    let required = profile_count(m, k);
    if required <= PROFILE_BUDGET {
        Ok(false)
    } else {
        Err(Error::Budget {
            required,
            budget: PROFILE_BUDGET,
        })
    }
}

fn exact_feasible(policies: &[SimplexPoint], i: usize, k: usize) -> bool {
    exact_plan(policies, i, k).is_ok()
}

/// Accumulates `weight * F((c + e_a)/N)(a)` into `g` for every `a`.
struct DeviationAccumulator<'a> {
    op: &'a PayoffOperator,
    n: f64,
    point: Vec<f64>,
    out: Vec<f64>,
}

impl<'a> DeviationAccumulator<'a> {
    fn new(op: &'a PayoffOperator, n: usize) -> Self {
        DeviationAccumulator {
            op,
            n: n as f64,
            point: vec![0.0; op.k()],
            out: vec![0.0; op.k()],
        }
    }

    fn evaluate(&mut self, opponent_counts: &[usize], g: &mut [f64]) {
        for (a, ga) in g.iter_mut().enumerate() {
            for (x, c) in self.point.iter_mut().zip(opponent_counts) {
                *x = *c as f64 / self.n;
            }
            self.point[a] += 1.0 / self.n;
            self.op.eval_into(&self.point, &mut self.out);
            *ga = self.out[a];
        }
    }
}

fn ln_factorials(m: usize) -> Vec<f64> {
    let mut table = vec![0.0; m + 1];
    for j in 1..=m {
        table[j] = table[j - 1] + (j as f64).ln();
    }
    table
}

/// Enumerates the compositions of `m` opponents into `K` actions with
/// multinomial weights.
fn exact_identical(op: &PayoffOperator, n: usize, policy: &SimplexPoint) -> Vec<f64> {
    let k = op.k();
    let m = n - 1;
    let lnf = ln_factorials(m);
    let ln_p: Vec<f64> = policy.weights().iter().map(|p| p.ln()).collect();
    let mut acc = DeviationAccumulator::new(op, n);
    let mut g = vec![0.0; k];
    let mut total = vec![0.0; k];
    let mut counts = vec![0usize; k];

    fn visit(a: usize, remaining: usize, counts: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        let k = counts.len();
        if a == k - 1 {
            counts[a] = remaining;
            f(counts);
            return;
        }
        for c in 0..=remaining {
            counts[a] = c;
            visit(a + 1, remaining - c, counts, f);
        }
    }

    visit(0, m, &mut counts, &mut |counts: &[usize]| {
        let mut ln_w = lnf[m];
        for (c, lp) in counts.iter().zip(&ln_p) {
            if *c > 0 {
                if lp.is_infinite() {
                    return;
                }
                ln_w += *c as f64 * lp - lnf[*c];
            }
        }
        let w = ln_w.exp();
        acc.evaluate(counts, &mut g);
        for (t, ga) in total.iter_mut().zip(&g) {
            *t += w * ga;
        }
    });
    total
}

/// Enumerates all opponent action profiles with product weights.
fn exact_profiles(op: &PayoffOperator, policies: &[SimplexPoint], i: usize) -> Vec<f64> {
    let k = op.k();
    let n = policies.len();
    let opponents: Vec<&SimplexPoint> = policies
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| p)
        .collect();
    let mut acc = DeviationAccumulator::new(op, n);
    let mut g = vec![0.0; k];
    let mut total = vec![0.0; k];
    let mut profile = vec![0usize; opponents.len()];
    let mut counts = vec![0usize; k];
    loop {
        let mut w = 1.0;
        counts.iter_mut().for_each(|c| *c = 0);
        for (p, a) in opponents.iter().zip(&profile) {
            w *= p[*a];
            counts[*a] += 1;
        }
        if w > 0.0 {
            acc.evaluate(&counts, &mut g);
            for (t, ga) in total.iter_mut().zip(&g) {
                *t += w * ga;
            }
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == profile.len() {
                return total;
            }
            profile[pos] += 1;
            if profile[pos] < k {
                break;
            }
            profile[pos] = 0;
            pos += 1;
        }
    }
}

fn deviation_exact(op: &PayoffOperator, policies: &[SimplexPoint], i: usize) -> Result<DeviationPayoffs> {
    let identical = exact_plan(policies, i, op.k())?;
    let mean = if identical && policies.len() > 1 {
        let opponent = if i == 0 { &policies[1] } else { &policies[0] };
        exact_identical(op, policies.len(), opponent)
    } else {
        exact_profiles(op, policies, i)
    };
    Ok(DeviationPayoffs {
        mean,
        covariance: None,
        samples: 0,
    })
}

/// Running sums of `g` and `g gᵀ` for one agent.
#[derive(Clone)]
struct Moments {
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Moments {
            sum: vec![0.0; k],
            outer: vec![0.0; k * k],
        }
    }

    fn add(&mut self, g: &[f64]) {
        let k = g.len();
        for a in 0..k {
            self.sum[a] += g[a];
            for b in 0..k {
                self.outer[a * k + b] += g[a] * g[b];
            }
        }
    }

    fn finish(self, samples: usize) -> DeviationPayoffs {
        let k = self.sum.len();
        let s = samples as f64;
        let mean: Vec<f64> = self.sum.iter().map(|v| v / s).collect();
        let denom = (s - 1.0).max(1.0);
        let mut covariance = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                covariance[a * k + b] = (self.outer[a * k + b] - s * mean[a] * mean[b]) / denom;
            }
        }
        DeviationPayoffs {
            mean,
            covariance: Some(covariance),
            samples,
        }
    }
}

fn deviation_mc<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    i: usize,
    samples: usize,
    rng: &mut R,
) -> Result<DeviationPayoffs> {
    if samples < 2 {
        return Err(Error::invalid("Monte Carlo needs at least two samples"));
    }
    let k = op.k();
    let mut acc = DeviationAccumulator::new(op, policies.len());
    let mut moments = Moments::new(k);
    let mut counts = vec![0usize; k];
    let mut g = vec![0.0; k];
    for _ in 0..samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for (j, p) in policies.iter().enumerate() {
            if j != i {
                counts[sample_index(p.weights(), rng)] += 1;
            }
        }
        acc.evaluate(&counts, &mut g);
        moments.add(&g);
    }
    Ok(moments.finish(samples))
}

fn deviation<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    i: usize,
    method: Method,
    rng: &mut R,
) -> Result<DeviationPayoffs> {
    validate_profile(op, policies, i)?;
    match method {
        Method::Exact => deviation_exact(op, policies, i),
        Method::MonteCarlo { samples } => deviation_mc(op, policies, i, samples, rng),
        Method::Auto { samples } => {
            if exact_feasible(policies, i, op.k()) {
                deviation_exact(op, policies, i)
            } else {
                deviation_mc(op, policies, i, samples, rng)
            }
        }
    }
}

/// Expected payoff `V^i` of agent `i`, optionally with `π^i` replaced by
/// `override_policy`.
pub fn expected_payoff<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    i: usize,
    override_policy: Option<&SimplexPoint>,
    method: Method,
    rng: &mut R,
) -> Result<Estimate> {
    let d = deviation(op, policies, i, method, rng)?;
    let own = override_policy.unwrap_or(&policies[i]);
    if own.k() != op.k() {
        return Err(Error::DimensionMismatch {
            expected: op.k(),
            found: own.k(),
        });
    }
    Ok(d.functional(own.weights()))
}

/// Gain of agent `i`'s best pure deviation over its current policy.
///
/// Monte Carlo estimates evaluate every deviation on the same sampled
/// opponent profiles.
pub fn exploitability<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    i: usize,
    method: Method,
    rng: &mut R,
) -> Result<Estimate> {
    let d = deviation(op, policies, i, method, rng)?;
    Ok(d.exploitability(&policies[i]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExploitabilityReport {
    pub per_agent: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub max: f64,
    pub max_agent: usize,
    pub method: ResolvedMethod,
    pub mc_samples: usize,
    /// Standard error of the maximizing agent's estimate.
    pub std_error: f64,
}

impl ExploitabilityReport {
    pub fn mean(&self) -> f64 {
        self.per_agent.iter().sum::<f64>() / self.per_agent.len() as f64
    }

    fn from_estimates(estimates: Vec<Estimate>, method: ResolvedMethod, mc_samples: usize) -> Self {
        let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
        let max_agent = argmax(&values);
        ExploitabilityReport {
            max: values[max_agent],
            std_error: estimates[max_agent].std_error,
            std_errors: estimates.iter().map(|e| e.std_error).collect(),
            per_agent: values,
            max_agent,
            method,
            mc_samples,
        }
    }
}

/// Exploitability of every agent in the profile.
///
/// The Monte Carlo path draws one full profile per sample and reuses it for
/// all agents: agent `i`'s opponent counts are the sample's counts minus its
/// own draw, which has the right distribution for each agent separately.
pub fn exploitability_report<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    method: Method,
    rng: &mut R,
) -> Result<ExploitabilityReport> {
    validate_profile(op, policies, 0)?;
    let all_identical = policies.iter().all(|p| *p == policies[0]);
    let exact = match method {
        Method::Exact => true,
        Method::MonteCarlo { .. } => false,
        Method::Auto { .. } => {
            let worst_agent = (0..policies.len()).all(|i| exact_feasible(policies, i, op.k()));
            worst_agent
                && (all_identical
                    || profile_count(policies.len() - 1, op.k()) * policies.len() as f64 <= PROFILE_BUDGET)
        }
    };
    if exact {
        let estimates = if all_identical {
            let e = deviation_exact(op, policies, 0)?.exploitability(&policies[0]);
            vec![e; policies.len()]
        } else {
            (0..policies.len())
                .map(|i| deviation_exact(op, policies, i).map(|d| d.exploitability(&policies[i])))
                .collect::<Result<Vec<_>>>()?
        };
        return Ok(ExploitabilityReport::from_estimates(
            estimates,
            ResolvedMethod::ExactEnumeration,
            0,
        ));
    }
    let samples = match method {
        Method::MonteCarlo { samples } | Method::Auto { samples } => samples,
        Method::Exact => unreachable!(),
    };
    if samples < 2 {
        return Err(Error::invalid("Monte Carlo needs at least two samples"));
    }
    let estimates = shared_sample_estimates(op, policies, samples, rng);
    Ok(ExploitabilityReport::from_estimates(
        estimates,
        ResolvedMethod::MonteCarlo,
        samples,
    ))
}

fn shared_sample_estimates<R: Rng + ?Sized>(
    op: &PayoffOperator,
    policies: &[SimplexPoint],
    samples: usize,
    rng: &mut R,
) -> Vec<Estimate> {
    let k = op.k();
    let n = policies.len();
    // draws[s * n + j] is agent j's action in sample s; tables[s] holds
    // F((c - e_b + e_a)/N)(a) at index b * K + a
    let mut draws = vec![0u16; samples * n];
    let mut tables = vec![0.0; samples * k * k];
    let mut counts = vec![0usize; k];
    let mut opponent = vec![0usize; k];
    let mut g = vec![0.0; k];
    let mut acc = DeviationAccumulator::new(op, n);
    for s in 0..samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for (j, p) in policies.iter().enumerate() {
            let a = sample_index(p.weights(), rng);
            draws[s * n + j] = a as u16;
            counts[a] += 1;
        }
        for b in 0..k {
            if counts[b] == 0 {
                continue;
            }
            opponent.copy_from_slice(&counts);
            opponent[b] -= 1;
            acc.evaluate(&opponent, &mut g);
            tables[(s * k + b) * k..(s * k + b + 1) * k].copy_from_slice(&g);
        }
    }
    (0..n)
        .into_par_iter()
        .with_min_len(16)
        .map(|j| {
            let mut moments = Moments::new(k);
            for s in 0..samples {
                let b = draws[s * n + j] as usize;
                moments.add(&tables[(s * k + b) * k..(s * k + b + 1) * k]);
            }
            moments.finish(samples).exploitability(&policies[j])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationMetrics {
    pub mean_policy: SimplexPoint,
    /// `||π^i - μ̄||²` per agent.
    pub deviations: Vec<f64>,
    pub mean_deviation: f64,
    /// `(1/N) Σ ||π* - π^i||`, when a reference equilibrium is given.
    pub mean_distance: Option<f64>,
    pub mean_sq_distance: Option<f64>,
}

pub fn population_metrics(policies: &[SimplexPoint], pi_star: Option<&SimplexPoint>) -> Result<PopulationMetrics> {
    let first = policies.first().ok_or_else(|| Error::invalid("empty policy profile"))?;
    let k = first.k();
    if let Some(p) = policies.iter().chain(pi_star).find(|p| p.k() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: p.k(),
        });
    }
    let n = policies.len() as f64;
    let mut mean = vec![0.0; k];
    for p in policies {
        for (m, w) in mean.iter_mut().zip(p.weights()) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let deviations: Vec<f64> = policies.iter().map(|p| squared_distance(p.weights(), &mean)).collect();
    let mean_deviation = deviations.iter().sum::<f64>() / n;
    let (mean_distance, mean_sq_distance) = match pi_star {
        Some(star) => {
            let sq: Vec<f64> = policies
                .iter()
                .map(|p| squared_distance(p.weights(), star.weights()))
                .collect();
            (
                Some(sq.iter().map(|d| d.sqrt()).sum::<f64>() / n),
                Some(sq.iter().sum::<f64>() / n),
            )
        }
        None => (None, None),
    };
    Ok(PopulationMetrics {
        mean_policy: SimplexPoint::new(mean)?,
        deviations,
        mean_deviation,
        mean_distance,
        mean_sq_distance,
    })
}
