//! Repeated play of the `N`-agent game and the two independent-learning
//! algorithms: projected ascent with full reward vectors, and its bandit
//! variant with epoch-wise importance-weighted estimates.
//!
//! Each agent owns a random stream keyed by `(master_seed, agent)`. Within a
//! round an agent draws its action first and its noise second, so results do
//! not depend on how the work is split across threads.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::equilibrium::trpa_step_in_place;
use crate::error::{Error, Result};
use crate::metrics::{exploitability_report, population_metrics, ExploitabilityReport, Method, PopulationMetrics};
use crate::payoffs::PayoffOperator;
use crate::rng::{agent_rng, stream_rng, StreamRng, METRICS_STREAM};
use crate::simplex::{counts_to_weights, empirical_measure, sample_index, EmpiricalMeasure, SimplexPoint};

// agents per rayon task; keeps scheduling overhead small next to the work
const MIN_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    /// Uniform on `[-√3σ, √3σ]`, which has standard deviation `σ`.
    Uniform,
    None,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            "none" => Ok(NoiseKind::None),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
            NoiseKind::None => "none",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GameConfig {
    pub n: usize,
    pub k: usize,
    pub operator: PayoffOperator,
    pub sigma: f64,
    pub noise: NoiseKind,
    pub master_seed: u64,
}

impl GameConfig {
    pub fn new(n: usize, operator: PayoffOperator, sigma: f64, noise: NoiseKind, master_seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("population size must be at least 2"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        Ok(GameConfig {
            n,
            k: operator.k(),
            operator,
            sigma,
            noise,
            master_seed,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.operator.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: self.operator.k(),
            });
        }
        if self.n < 2 || self.k < 1 {
            return Err(Error::invalid("need N >= 2 and K >= 1"));
        }
        Ok(())
    }

    /// Fresh per-agent streams for this configuration's master seed.
    pub fn agent_streams(&self) -> Vec<StreamRng> {
        (0..self.n).map(|i| agent_rng(self.master_seed, i)).collect()
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_noise(self.noise, self.sigma, rng)
    }
}

fn sample_noise<R: Rng + ?Sized>(kind: NoiseKind, sigma: f64, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::None => 0.0,
        _ if sigma == 0.0 => 0.0,
        NoiseKind::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        }
        NoiseKind::Uniform => {
            let half = 3f64.sqrt() * sigma;
            rng.random_range(-half..half)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub tau: f64,
    /// Exploration probability, bandit only.
    pub epsilon: Option<f64>,
    /// Rounds under full feedback, epochs under bandit feedback.
    pub horizon: usize,
}

impl Schedule {
    fn validate(&self, bandit: bool) -> Result<f64> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !bandit {
            return Ok(0.0);
        }
        match self.epsilon {
            Some(e) if e > 0.0 && e < 1.0 => Ok(e),
            _ => Err(Error::invalid("bandit schedule needs epsilon in (0, 1)")),
        }
    }
}

/// `η_t = τ⁻¹/(t+2)`.
pub fn learning_rate(t: usize, tau: f64) -> f64 {
    1.0 / (tau * (t as f64 + 2.0))
}

/// `T_h = ⌈ε⁻¹ ln(h+2)⌉`, at least 1.
pub fn epoch_length(h: usize, epsilon: f64) -> usize {
    let t = ((h as f64 + 2.0).ln() / epsilon).ceil();
    (t as usize).max(1)
}

/// Number of rounds consumed by the first `epochs` epochs.
pub fn rounds_for_epochs(epochs: usize, epsilon: f64) -> usize {
    (0..epochs).map(|h| epoch_length(h, epsilon)).sum()
}

/// Largest `H` whose epochs fit in `total_rounds`.
pub fn epochs_within_rounds(total_rounds: usize, epsilon: f64) -> usize {
    let mut used = 0;
    let mut h = 0;
    loop {
        let next = epoch_length(h, epsilon);
        if used + next > total_rounds {
            return h;
        }
        used += next;
        h += 1;
    }
}

/// `(N^{-1/3}, N^{-1/2})` for strongly monotone games, `(N^{-1/4}, N^{-1/2})`
/// otherwise.
pub fn optimal_hyperparams(n: usize, strongly_monotone: bool) -> (f64, f64) {
    let n = n as f64;
    let tau = if strongly_monotone {
        n.powf(-1.0 / 3.0)
    } else {
        n.powf(-0.25)
    };
    (tau, n.powf(-0.5))
}

/// `K r e_a`.
pub fn importance_estimate(r: f64, a: usize, k: usize) -> Result<Vec<f64>> {
    if a >= k {
        return Err(Error::invalid(format!("action {a} out of range for K = {k}")));
    }
    let mut v = vec![0.0; k];
    v[a] = k as f64 * r;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub actions: Vec<usize>,
    pub mu_hat: EmpiricalMeasure,
    /// Noisy reward vector observed by each agent.
    pub rewards: Vec<Vec<f64>>,
}

/// One round of play: independent actions, the realized measure, and noisy
/// reward vectors. Agent `i` draws from `streams[i]`: one action, then `K`
/// noise values.
pub fn play_round(policies: &[SimplexPoint], config: &GameConfig, streams: &mut [StreamRng]) -> Result<Round> {
    config.validate()?;
    if policies.len() != config.n || streams.len() != config.n {
        return Err(Error::DimensionMismatch {
            expected: config.n,
            found: if policies.len() != config.n {
                policies.len()
            } else {
                streams.len()
            },
        });
    }
    if let Some(p) = policies.iter().find(|p| p.k() != config.k) {
        return Err(Error::DimensionMismatch {
            expected: config.k,
            found: p.k(),
        });
    }
    let actions: Vec<usize> = policies
        .par_iter()
        .zip(streams.par_iter_mut())
        .with_min_len(MIN_CHUNK)
        .map(|(p, rng)| sample_index(p.weights(), rng))
        .collect();
    let mu_hat = empirical_measure(&actions, config.k)?;
    let clean = config.operator.eval(&mu_hat.to_point())?;
    let rewards = streams
        .par_iter_mut()
        .with_min_len(MIN_CHUNK)
        .map(|rng| clean.iter().map(|f| f + config.noise(rng)).collect())
        .collect();
    Ok(Round {
        actions,
        mu_hat,
        rewards,
    })
}

#[derive(Clone, Debug)]
pub struct AgentState {
    policy: Vec<f64>,
    rng: StreamRng,
    estimate: Vec<f64>,
    explored: bool,
    exploring: bool,
    action: usize,
}

impl AgentState {
    fn new(k: usize, rng: StreamRng) -> Self {
        AgentState {
            policy: SimplexPoint::uniform(k).into_weights(),
            rng,
            estimate: vec![0.0; k],
            explored: false,
            exploring: false,
            action: 0,
        }
    }

    pub fn policy(&self) -> SimplexPoint {
        SimplexPoint::from_raw(self.policy.clone())
    }

    /// Importance-weighted estimate of the current epoch.
    pub fn epoch_estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn explored_this_epoch(&self) -> bool {
        self.explored
    }
}

/// What to compute at each checkpoint.
#[derive(Clone, Debug, Default)]
pub struct MetricsPlan {
    /// Reference equilibrium for the distance metrics.
    pub pi_star: Option<SimplexPoint>,
    /// Exploitability method; `None` skips it.
    pub exploit: Option<Method>,
    pub record_policies: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Round index `t` (full feedback) or epoch index `h` (bandit).
    pub time_index: usize,
    pub rounds_elapsed: usize,
    pub population: PopulationMetrics,
    pub exploitability: Option<ExploitabilityReport>,
    pub policies: Option<Vec<SimplexPoint>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub final_policies: Vec<SimplexPoint>,
}

struct Population<'a> {
    config: &'a GameConfig,
    agents: Vec<AgentState>,
    counts: Vec<usize>,
    measure: Vec<f64>,
    clean: Vec<f64>,
}

impl<'a> Population<'a> {
    fn uniform(config: &'a GameConfig) -> Self {
        let agents = config
            .agent_streams()
            .into_iter()
            .map(|rng| AgentState::new(config.k, rng))
            .collect();
        Self::with_agents(config, agents)
    }

    fn with_agents(config: &'a GameConfig, agents: Vec<AgentState>) -> Self {
        Population {
            config,
            agents,
            counts: vec![0; config.k],
            measure: vec![0.0; config.k],
            clean: vec![0.0; config.k],
        }
    }

    fn policies(&self) -> Vec<SimplexPoint> {
        self.agents.iter().map(|a| a.policy()).collect()
    }

    /// Tallies the actions already stored on the agents and evaluates `F`.
    fn evaluate_measure(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for agent in &self.agents {
            self.counts[agent.action] += 1;
        }
        self.measure = counts_to_weights(&self.counts, self.config.n);
        self.config.operator.eval_into(&self.measure, &mut self.clean);
    }

    fn full_round(&mut self, eta: f64, tau: f64) {
        self.agents
            .par_iter_mut()
            .with_min_len(MIN_CHUNK)
            .for_each(|agent| agent.action = sample_index(&agent.policy, &mut agent.rng));
        self.evaluate_measure();
        let config = self.config;
        let clean = &self.clean;
        self.agents.par_iter_mut().with_min_len(MIN_CHUNK).for_each_init(
            || (vec![0.0; config.k], Vec::with_capacity(config.k)),
            |(signal, scratch), agent| {
                for (s, f) in signal.iter_mut().zip(clean) {
                    *s = f + config.noise(&mut agent.rng);
                }
                trpa_step_in_place(&mut agent.policy, signal, eta, tau, scratch);
            },
        );
    }

    fn begin_epoch(&mut self) {
        for agent in &mut self.agents {
            agent.estimate.iter_mut().for_each(|e| *e = 0.0);
            agent.explored = false;
        }
    }

    /// One bandit round: explore uniformly with probability `ε`, otherwise
    /// play the policy; explorers overwrite their estimate.
    fn bandit_round(&mut self, epsilon: f64) {
        let k = self.config.k;
        self.agents.par_iter_mut().with_min_len(MIN_CHUNK).for_each(|agent| {
            agent.exploring = agent.rng.random::<f64>() < epsilon;
            if agent.exploring {
                agent.action = agent.rng.random_range(0..k);
                agent.explored = true;
            } else {
                agent.action = sample_index(&agent.policy, &mut agent.rng);
            }
        });
        self.evaluate_measure();
        let config = self.config;
        let clean = &self.clean;
        self.agents.par_iter_mut().with_min_len(MIN_CHUNK).for_each(|agent| {
            if agent.exploring {
                let r = clean[agent.action] + config.noise(&mut agent.rng);
                agent.estimate.iter_mut().for_each(|e| *e = 0.0);
                agent.estimate[agent.action] = k as f64 * r;
            }
        });
    }

    fn bandit_update(&mut self, eta: f64, tau: f64) {
        let k = self.config.k;
        self.agents.par_iter_mut().with_min_len(MIN_CHUNK).for_each_init(
            || Vec::with_capacity(k),
            |scratch, agent| {
                let estimate = std::mem::take(&mut agent.estimate);
                trpa_step_in_place(&mut agent.policy, &estimate, eta, tau, scratch);
                agent.estimate = estimate;
            },
        );
    }

    fn record(
        &self,
        time_index: usize,
        rounds_elapsed: usize,
        checkpoint: usize,
        plan: &MetricsPlan,
    ) -> Result<Record> {
        let policies = self.policies();
        let population = population_metrics(&policies, plan.pi_star.as_ref())?;
        let exploitability = match plan.exploit {
            None => None,
            Some(method) => {
                let mut rng = stream_rng(self.config.master_seed, METRICS_STREAM + checkpoint as u64);
                Some(exploitability_report(
                    &self.config.operator,
                    &policies,
                    method,
                    &mut rng,
                )?)
            }
        };
        Ok(Record {
            time_index,
            rounds_elapsed,
            population,
            exploitability,
            policies: plan.record_policies.then_some(policies),
        })
    }
}

fn normalize_checkpoints(checkpoints: &[usize], horizon: usize) -> Result<Vec<usize>> {
    let mut points = checkpoints.to_vec();
    points.sort_unstable();
    points.dedup();
    if let Some(last) = points.last() {
        if *last > horizon {
            return Err(Error::invalid(format!("checkpoint {last} beyond horizon {horizon}")));
        }
    }
    Ok(points)
}

/// Full-feedback learning from uniform policies for `schedule.horizon`
/// rounds. Checkpoint `t` is logged after `t` updates.
pub fn run_trpa_full(
    config: &GameConfig,
    schedule: &Schedule,
    checkpoints: &[usize],
    plan: &MetricsPlan,
) -> Result<Trajectory> {
    config.validate()?;
    schedule.validate(false)?;
    let points = normalize_checkpoints(checkpoints, schedule.horizon)?;
    let mut population = Population::uniform(config);
    let mut records = Vec::with_capacity(points.len());
    let mut next = points.iter().peekable();
    for t in 0..=schedule.horizon {
        if next.peek() == Some(&&t) {
            next.next();
            records.push(population.record(t, t, records.len(), plan)?);
        }
        if t == schedule.horizon {
            break;
        }
        population.full_round(learning_rate(t, schedule.tau), schedule.tau);
    }
    Ok(Trajectory {
        records,
        final_policies: population.policies(),
    })
}

/// Bandit-feedback learning for `schedule.horizon` epochs. Checkpoint `h`
/// is logged after `h` epoch updates; the policy of record is constant
/// within an epoch.
pub fn run_trpa_bandit(
    config: &GameConfig,
    schedule: &Schedule,
    checkpoints: &[usize],
    plan: &MetricsPlan,
) -> Result<Trajectory> {
    config.validate()?;
    let epsilon = schedule.validate(true)?;
    let points = normalize_checkpoints(checkpoints, schedule.horizon)?;
    let mut population = Population::uniform(config);
    let mut records = Vec::with_capacity(points.len());
    let mut next = points.iter().peekable();
    let mut rounds = 0;
    for h in 0..=schedule.horizon {
        if next.peek() == Some(&&h) {
            next.next();
            records.push(population.record(h, rounds, records.len(), plan)?);
        }
        if h == schedule.horizon {
            break;
        }
        let length = epoch_length(h, epsilon);
        population.begin_epoch();
        for _ in 0..length {
            population.bandit_round(epsilon);
        }
        population.bandit_update(learning_rate(h, schedule.tau), schedule.tau);
        rounds += length;
    }
    Ok(Trajectory {
        records,
        final_policies: population.policies(),
    })
}

/// Outcome of one bandit epoch played with frozen policies.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochEstimates {
    pub estimates: Vec<Vec<f64>>,
    pub explored: Vec<bool>,
}

/// Plays one epoch of `length` bandit rounds with the given policies held
/// fixed and returns each agent's final estimate. Advances `streams`, so
/// repeated calls give independent replays.
pub fn exploration_epoch(
    config: &GameConfig,
    policies: &[SimplexPoint],
    epsilon: f64,
    length: usize,
    streams: &mut Vec<StreamRng>,
) -> Result<EpochEstimates> {
    config.validate()?;
    if policies.len() != config.n || streams.len() != config.n {
        return Err(Error::DimensionMismatch {
            expected: config.n,
            found: policies.len().min(streams.len()),
        });
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid("epsilon must lie in (0, 1)"));
    }
    let agents = policies
        .iter()
        .zip(streams.drain(..))
        .map(|(p, rng)| {
            let mut agent = AgentState::new(config.k, rng);
            agent.policy = p.weights().to_vec();
            agent
        })
        .collect();
    let mut population = Population::with_agents(config, agents);
    population.begin_epoch();
    for _ in 0..length {
        population.bandit_round(epsilon);
    }
    let mut out = EpochEstimates {
        estimates: Vec::with_capacity(config.n),
        explored: Vec::with_capacity(config.n),
    };
    for agent in population.agents {
        out.estimates.push(agent.estimate);
        out.explored.push(agent.explored);
        streams.push(agent.rng);
    }
    Ok(out)
}
