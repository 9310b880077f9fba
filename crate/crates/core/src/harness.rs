//! Experiment configuration, orchestration and CSV output.
//!
//! Configurations are TOML files read as flat dotted keys (`game.N`,
//! `schedule.tau`, ...). Any key can be overridden from the command line
//! with the same dotted name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{
    epochs_within_rounds, optimal_hyperparams, run_trpa_bandit, run_trpa_full, GameConfig, MetricsPlan, NoiseKind,
    Record, Schedule, Trajectory,
};
use crate::equilibrium::{solve_mfne, RegularizedSolution, SolverOptions, StepRule};
use crate::error::{Error, Result};
use crate::metrics::{Method, DEFAULT_MC_SAMPLES};
use crate::payoffs::{
    estimate_lipschitz, estimate_monotonicity, make_beach_bar, make_collision, make_curve_table, make_kl, make_linear,
    CurveTableParams, LinearParams, Matrix, PayoffOperator,
};
use crate::simplex::SimplexPoint;

pub const SEED_COLUMNS: [&str; 9] = [
    "time_index",
    "rounds_elapsed",
    "max_exploitability",
    "mean_exploitability",
    "mean_dist_to_mfne",
    "mean_sq_dist_to_mfne",
    "mean_policy_deviation",
    "exploit_method",
    "exploit_std_error",
];

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "N",
    "tau",
    "epsilon",
    "final_max_exploit_mean",
    "final_max_exploit_std",
    "final_mean_dist_mean",
    "final_mean_dist_std",
    "seeds",
];

// numeric per-seed columns averaged in the aggregate file
const METRIC_COLUMNS: [&str; 5] = [
    "max_exploitability",
    "mean_exploitability",
    "mean_dist_to_mfne",
    "mean_sq_dist_to_mfne",
    "mean_policy_deviation",
];

const CHECK_SAMPLES: usize = 10_000;
const CHECK_SEED: u64 = 0xc4ec;

/// Flat view of a configuration: dotted key to TOML value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, toml::Value>,
    base_dir: PathBuf,
}

impl ConfigMap {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let mut values = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut values);
        Ok(ConfigMap {
            values,
            base_dir: base_dir.into(),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    /// Sets `key` from command-line text, read as a TOML value when it
    /// parses as one and as a bare string otherwise.
    pub fn set_override(&mut self, key: &str, raw: &str) {
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.values.insert(key.to_string(), value);
    }

    pub fn set(&mut self, key: &str, value: toml::Value) {
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&toml::Value> {
        self.values.get(key)
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(Error::config(key, "expected a number")),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(toml::Value::Float(f)) if *f >= 0.0 && f.fract() == 0.0 && *f < 1e18 => Ok(Some(*f as usize)),
            Some(_) => Err(Error::config(key, "expected a non-negative integer")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(Error::config(key, "expected a string")),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(Error::config(key, "expected true or false")),
        }
    }

    fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => number_array(v)
                .map(Some)
                .ok_or_else(|| Error::config(key, "expected an array of numbers")),
        }
    }

    fn matrix(&self, key: &str) -> Result<Option<Matrix>> {
        let Some(value) = self.get(key) else {
            return Ok(None);
        };
        let rows = value
            .as_array()
            .and_then(|rows| rows.iter().map(number_array).collect::<Option<Vec<_>>>())
            .ok_or_else(|| Error::config(key, "expected an array of numeric rows"))?;
        Matrix::from_rows(rows)
            .map(Some)
            .map_err(|e| Error::config(key, e.to_string()))
    }

    fn require<T>(&self, key: &str, value: Option<T>) -> Result<T> {
        value.ok_or_else(|| Error::config(key, "missing"))
    }
}

fn number_array(v: &toml::Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| match x {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
        .collect()
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorSpec {
    /// Random linear operator from `seed`, or explicit `S`, `X`, `b`.
    Linear {
        k: usize,
        seed: u64,
        normalize: bool,
        explicit: Option<LinearParams>,
    },
    Affine {
        m: Matrix,
        b: Vec<f64>,
    },
    Constant {
        values: Vec<f64>,
    },
    Kl {
        mu_ref: Vec<f64>,
        gamma: f64,
    },
    BeachBar {
        k: usize,
        alpha: f64,
    },
    /// Collision weights; the population size comes from the game.
    Collision {
        alphas: Vec<f64>,
    },
    CurveTable {
        params: CurveTableParams,
    },
}

impl OperatorSpec {
    fn from_config(cfg: &ConfigMap) -> Result<Self> {
        let kind = cfg.require("operator.kind", cfg.string("operator.kind")?)?;
        let k = cfg.uint("game.K")?;
        let spec = match kind {
            "linear" => {
                let explicit = match cfg.matrix("operator.S")? {
                    None => None,
                    Some(s) => {
                        let dim = s.dim();
                        let x = cfg.matrix("operator.X")?.unwrap_or_else(|| Matrix::zeros(dim));
                        let b = cfg.floats("operator.b")?.unwrap_or_else(|| vec![0.0; dim]);
                        Some(LinearParams::new(s, x, b).map_err(|e| Error::config("operator.S", e.to_string()))?)
                    }
                };
                let k = match &explicit {
                    Some(p) => p.s.dim(),
                    None => cfg.require("game.K", k)?,
                };
                OperatorSpec::Linear {
                    k,
                    seed: cfg.uint("operator.seed")?.unwrap_or(0) as u64,
                    normalize: cfg.boolean("operator.normalize")?.unwrap_or(true),
                    explicit,
                }
            }
            "affine" => OperatorSpec::Affine {
                m: cfg.require("operator.M", cfg.matrix("operator.M")?)?,
                b: cfg.require("operator.b", cfg.floats("operator.b")?)?,
            },
            "constant" => OperatorSpec::Constant {
                values: cfg.require("operator.values", cfg.floats("operator.values")?)?,
            },
            "kl" => {
                let mu_ref = match cfg.floats("operator.mu_ref")? {
                    Some(r) => r,
                    None => {
                        let k = cfg.require("game.K", k)?;
                        vec![1.0 / k as f64; k]
                    }
                };
                OperatorSpec::Kl {
                    mu_ref,
                    gamma: cfg.require("operator.gamma", cfg.float("operator.gamma")?)?,
                }
            }
            "beach_bar" => OperatorSpec::BeachBar {
                k: cfg.require("game.K", k)?,
                alpha: cfg.float("operator.alpha")?.unwrap_or(1.0),
            },
            "collision" => OperatorSpec::Collision {
                alphas: cfg.require("operator.alphas", cfg.floats("operator.alphas")?)?,
            },
            "curve_table" => {
                let rel = cfg.require("operator.path", cfg.string("operator.path")?)?;
                let path = cfg.base_dir.join(rel);
                let params = CurveTableParams::from_csv_path(&path)
                    .map_err(|e| Error::config("operator.path", e.to_string()))?;
                OperatorSpec::CurveTable { params }
            }
            other => {
                return Err(Error::config(
                    "operator.kind",
                    format!("unknown operator kind {other:?}"),
                ))
            }
        };
        if let Some(k) = k {
            let built = spec.build(2).map_err(|e| Error::config("operator", e.to_string()))?;
            if built.k() != k {
                return Err(Error::config(
                    "game.K",
                    format!("operator has {} actions but game.K = {k}", built.k()),
                ));
            }
        }
        Ok(spec)
    }

    /// Builds the operator for a population of `n` agents.
    pub fn build(&self, n: usize) -> Result<PayoffOperator> {
        match self {
            OperatorSpec::Linear {
                k,
                seed,
                normalize,
                explicit,
            } => match explicit {
                Some(params) => Ok(PayoffOperator::linear(params.clone(), *normalize)),
                None => make_linear(*k, &mut ChaCha8Rng::seed_from_u64(*seed), *normalize),
            },
            OperatorSpec::Affine { m, b } => PayoffOperator::affine(m.clone(), b.clone()),
            OperatorSpec::Constant { values } => PayoffOperator::constant(values.clone()),
            OperatorSpec::Kl { mu_ref, gamma } => make_kl(SimplexPoint::new(mu_ref.clone())?, *gamma),
            OperatorSpec::BeachBar { k, alpha } => make_beach_bar(*k, *alpha),
            OperatorSpec::Collision { alphas } => make_collision(alphas.clone(), n),
            OperatorSpec::CurveTable { params } => Ok(make_curve_table(params.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Full,
    Bandit,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Full => "trpa-full",
            Algorithm::Bandit => "trpa-bandit",
        }
    }
}

/// A schedule value given explicitly or resolved from the population size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Param {
    Auto,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    /// Rounds (full feedback) or epochs (bandit).
    Steps(usize),
    /// Total rounds; bandit runs use as many whole epochs as fit.
    TotalRounds(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Checkpoints {
    /// `{0, 1, 2, 4, 8, ..., horizon}`.
    Geometric,
    List(Vec<usize>),
}

impl Checkpoints {
    pub fn resolve(&self, horizon: usize) -> Result<Vec<usize>> {
        match self {
            Checkpoints::Geometric => {
                let mut points = vec![0];
                let mut t = 1;
                while t < horizon {
                    points.push(t);
                    t *= 2;
                }
                if horizon > 0 {
                    points.push(horizon);
                }
                Ok(points)
            }
            Checkpoints::List(list) => {
                if let Some(bad) = list.iter().find(|t| **t > horizon) {
                    return Err(Error::config(
                        "checkpoints",
                        format!("checkpoint {bad} beyond horizon {horizon}"),
                    ));
                }
                let mut points = list.clone();
                points.sort_unstable();
                points.dedup();
                Ok(points)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub n: usize,
    pub sigma: f64,
    pub noise: NoiseKind,
    pub operator: OperatorSpec,
    pub algorithm: Algorithm,
    pub tau: Param,
    pub epsilon: Param,
    pub horizon: Horizon,
    pub seeds: Vec<u64>,
    pub checkpoints: Checkpoints,
    pub out_dir: PathBuf,
    pub record_policies: bool,
    /// `None` disables exploitability.
    pub exploit: Option<Method>,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub solver: SolverOptions,
}

impl ExperimentSpec {
    pub fn from_config(cfg: &ConfigMap) -> Result<Self> {
        let n = cfg.require("game.N", cfg.uint("game.N")?)?;
        if n < 2 {
            return Err(Error::config("game.N", "population size must be at least 2"));
        }
        let sigma = cfg.float("game.sigma")?.unwrap_or(0.1);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("game.sigma", "must be finite and non-negative"));
        }
        let noise = match cfg.string("game.noise")? {
            None => NoiseKind::Gaussian,
            Some(s) => NoiseKind::parse(s).map_err(|e| Error::config("game.noise", e.to_string()))?,
        };
        let operator = OperatorSpec::from_config(cfg)?;
        let algorithm = match cfg.require("algorithm", cfg.string("algorithm")?)? {
            "trpa-full" => Algorithm::Full,
            "trpa-bandit" => Algorithm::Bandit,
            other => return Err(Error::config("algorithm", format!("unknown algorithm {other:?}"))),
        };
        let param = |key: &str| -> Result<Param> {
            match cfg.get(key) {
                None => Ok(Param::Auto),
                Some(toml::Value::String(s)) if s == "auto" => Ok(Param::Auto),
                Some(_) => {
                    let v = cfg.float(key)?.unwrap_or_default();
                    Ok(Param::Value(v))
                }
            }
        };
        let tau = param("schedule.tau")?;
        if let Param::Value(t) = tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("schedule.tau", "must be positive"));
            }
        }
        let epsilon = param("schedule.epsilon")?;
        if let Param::Value(e) = epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::config("schedule.epsilon", "must lie in (0, 1)"));
            }
        }
        let horizon = match (cfg.uint("schedule.horizon")?, cfg.uint("schedule.total_rounds")?) {
            (Some(h), None) => Horizon::Steps(h),
            (None, Some(r)) => Horizon::TotalRounds(r),
            (None, None) => return Err(Error::config("schedule.horizon", "missing")),
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "schedule.total_rounds",
                    "give either schedule.horizon or schedule.total_rounds",
                ))
            }
        };
        let seeds = match cfg.get("seeds") {
            None => vec![0],
            Some(toml::Value::Integer(s)) if *s >= 0 => vec![*s as u64],
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|s| s.as_integer().filter(|s| *s >= 0).map(|s| s as u64))
                        .collect()
                })
                .ok_or_else(|| Error::config("seeds", "expected non-negative integers"))?,
        };
        if seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let checkpoints = match cfg.get("checkpoints") {
            None => Checkpoints::Geometric,
            Some(toml::Value::String(s)) if s == "geometric" => Checkpoints::Geometric,
            Some(v) => Checkpoints::List(
                v.as_array()
                    .and_then(|a| {
                        a.iter()
                            .map(|t| t.as_integer().filter(|t| *t >= 0).map(|t| t as usize))
                            .collect()
                    })
                    .ok_or_else(|| Error::config("checkpoints", "expected \"geometric\" or a list of indices"))?,
            ),
        };
        let samples = cfg.uint("metrics.mc_samples")?.unwrap_or(DEFAULT_MC_SAMPLES);
        if samples < 2 {
            return Err(Error::config("metrics.mc_samples", "need at least two samples"));
        }
        let exploit = match cfg.string("metrics.exploit")?.unwrap_or("auto") {
            "none" => None,
            "exact" => Some(Method::Exact),
            "mc" => Some(Method::MonteCarlo { samples }),
            "auto" => Some(Method::Auto { samples }),
            other => return Err(Error::config("metrics.exploit", format!("unknown method {other:?}"))),
        };
        let mut solver = SolverOptions::default();
        if let Some(tol) = cfg.float("solver.tol")? {
            solver.tol = tol;
        }
        if let Some(max_iter) = cfg.uint("solver.max_iter")? {
            solver.max_iter = max_iter;
        }
        if let Some(eta) = cfg.float("solver.eta")? {
            solver.step = StepRule::Constant(eta);
        }
        let spec = ExperimentSpec {
            n,
            sigma,
            noise,
            operator,
            algorithm,
            tau,
            epsilon,
            horizon,
            seeds,
            checkpoints,
            out_dir: PathBuf::from(cfg.string("output.dir")?.unwrap_or("out")),
            record_policies: cfg.boolean("output.record_policies")?.unwrap_or(false),
            exploit,
            workers: cfg.uint("run.workers")?.unwrap_or(0),
            solver,
        };
        // surface horizon/checkpoint problems before any work starts
        let operator = spec
            .operator
            .build(spec.n)
            .map_err(|e| Error::config("operator", e.to_string()))?;
        let resolved = spec.resolve_schedule(&operator)?;
        spec.checkpoints.resolve(resolved.horizon)?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config(&ConfigMap::from_path(path)?)
    }

    /// Concrete `(τ, ε, horizon)` for this population, with "auto" values
    /// taken from the closed-form rates and the strong-monotonicity flag
    /// read from the operator metadata.
    pub fn resolve_schedule(&self, operator: &PayoffOperator) -> Result<Schedule> {
        let strongly = operator.monotonicity().is_some_and(|l| l > 0.0);
        let (auto_tau, auto_eps) = optimal_hyperparams(self.n, strongly);
        let tau = match self.tau {
            Param::Auto => auto_tau,
            Param::Value(t) => t,
        };
        let epsilon = match (self.algorithm, self.epsilon) {
            (Algorithm::Full, _) => None,
            (Algorithm::Bandit, Param::Auto) => Some(auto_eps),
            (Algorithm::Bandit, Param::Value(e)) => Some(e),
        };
        let horizon = match (self.horizon, epsilon) {
            (Horizon::Steps(h), _) => h,
            (Horizon::TotalRounds(r), None) => r,
            (Horizon::TotalRounds(r), Some(e)) => epochs_within_rounds(r, e),
        };
        Ok(Schedule { tau, epsilon, horizon })
    }
}

/// One row of a per-seed CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub time_index: usize,
    pub rounds_elapsed: usize,
    pub max_exploitability: Option<f64>,
    pub mean_exploitability: Option<f64>,
    pub mean_dist_to_mfne: Option<f64>,
    pub mean_sq_dist_to_mfne: Option<f64>,
    pub mean_policy_deviation: f64,
    pub exploit_method: Option<&'static str>,
    pub exploit_std_error: Option<f64>,
}

impl Row {
    fn from_record(r: &Record) -> Self {
        let e = r.exploitability.as_ref();
        Row {
            time_index: r.time_index,
            rounds_elapsed: r.rounds_elapsed,
            max_exploitability: e.map(|e| e.max),
            mean_exploitability: e.map(|e| e.mean()),
            mean_dist_to_mfne: r.population.mean_distance,
            mean_sq_dist_to_mfne: r.population.mean_sq_distance,
            mean_policy_deviation: r.population.mean_deviation,
            exploit_method: e.map(|e| e.method.label()),
            exploit_std_error: e.map(|e| e.std_error),
        }
    }

    fn metric(&self, column: &str) -> Option<f64> {
        match column {
            "max_exploitability" => self.max_exploitability,
            "mean_exploitability" => self.mean_exploitability,
            "mean_dist_to_mfne" => self.mean_dist_to_mfne,
            "mean_sq_dist_to_mfne" => self.mean_sq_dist_to_mfne,
            "mean_policy_deviation" => Some(self.mean_policy_deviation),
            _ => None,
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.time_index.to_string(),
            self.rounds_elapsed.to_string(),
            opt(self.max_exploitability),
            opt(self.mean_exploitability),
            opt(self.mean_dist_to_mfne),
            opt(self.mean_sq_dist_to_mfne),
            self.mean_policy_deviation.to_string(),
            self.exploit_method.unwrap_or("").to_string(),
            opt(self.exploit_std_error),
        ]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub rows: Vec<Row>,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub n: usize,
    pub schedule: Schedule,
    pub mfne: RegularizedSolution,
    pub seeds: Vec<SeedResult>,
}

impl ExperimentOutcome {
    /// Mean and sample standard deviation over seeds of a final-checkpoint
    /// metric, if every seed reports it.
    pub fn final_stats(&self, column: &str) -> Option<(f64, f64)> {
        let values: Option<Vec<f64>> = self.seeds.iter().map(|s| s.rows.last()?.metric(column)).collect();
        values.map(|v| mean_std(&v))
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("run.workers", e.to_string()))?;
    Ok(pool.install(f))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every seed of `spec`, writing `seed_<s>.csv`, `aggregate.csv` and
/// `mfne.csv` (plus `policies_seed_<s>.csv` when policies are recorded) to
/// the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let operator = spec
        .operator
        .build(spec.n)
        .map_err(|e| Error::config("operator", e.to_string()))?;
    let schedule = spec.resolve_schedule(&operator)?;
    let checkpoints = spec.checkpoints.resolve(schedule.horizon)?;
    let mfne = solve_mfne(&operator, schedule.tau, &spec.solver)?;
    create_dir(&spec.out_dir)?;
    let plan = MetricsPlan {
        pi_star: Some(mfne.pi_star.clone()),
        exploit: spec.exploit,
        record_policies: spec.record_policies,
    };
    let seeds = with_pool(spec.workers, || {
        spec.seeds
            .par_iter()
            .map(|&seed| {
                let config = GameConfig::new(spec.n, operator.clone(), spec.sigma, spec.noise, seed)?;
                let trajectory = match spec.algorithm {
                    Algorithm::Full => run_trpa_full(&config, &schedule, &checkpoints, &plan)?,
                    Algorithm::Bandit => run_trpa_bandit(&config, &schedule, &checkpoints, &plan)?,
                };
                let rows = trajectory.records.iter().map(Row::from_record).collect();
                Ok(SeedResult { seed, rows, trajectory })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let outcome = ExperimentOutcome {
        n: spec.n,
        schedule,
        mfne,
        seeds,
    };
    write_outputs(&spec.out_dir, &outcome, spec.record_policies)?;
    Ok(outcome)
}

fn write_outputs(dir: &Path, outcome: &ExperimentOutcome, record_policies: bool) -> Result<()> {
    for s in &outcome.seeds {
        let path = dir.join(format!("seed_{}.csv", s.seed));
        let mut w = csv_writer(&path)?;
        w.write_record(SEED_COLUMNS)?;
        for row in &s.rows {
            w.write_record(row.fields())?;
        }
        finish(w, &path)?;
        if record_policies {
            write_policies(dir, s)?;
        }
    }
    write_aggregate(dir, outcome)?;
    write_mfne(&dir.join("mfne.csv"), &outcome.mfne)
}

fn write_policies(dir: &Path, s: &SeedResult) -> Result<()> {
    let path = dir.join(format!("policies_seed_{}.csv", s.seed));
    let mut w = csv_writer(&path)?;
    let k = s.trajectory.final_policies.first().map(|p| p.k()).unwrap_or(0);
    let mut header = vec!["time_index".to_string(), "agent".to_string()];
    header.extend((1..=k).map(|a| format!("pi_{a}")));
    w.write_record(&header)?;
    for r in &s.trajectory.records {
        for (i, p) in r.policies.iter().flatten().enumerate() {
            let mut fields = vec![r.time_index.to_string(), i.to_string()];
            fields.extend(p.weights().iter().map(|x| x.to_string()));
            w.write_record(&fields)?;
        }
    }
    finish(w, &path)
}

fn write_aggregate(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    let path = dir.join("aggregate.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["time_index".to_string(), "rounds_elapsed".to_string()];
    for c in METRIC_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    header.push("seeds".to_string());
    w.write_record(&header)?;
    let first = &outcome.seeds[0].rows;
    for (j, row) in first.iter().enumerate() {
        let mut fields = vec![row.time_index.to_string(), row.rounds_elapsed.to_string()];
        for c in METRIC_COLUMNS {
            let values: Option<Vec<f64>> = outcome.seeds.iter().map(|s| s.rows[j].metric(c)).collect();
            match values {
                Some(v) => {
                    let (m, sd) = mean_std(&v);
                    fields.push(m.to_string());
                    fields.push(sd.to_string());
                }
                None => fields.extend([String::new(), String::new()]),
            }
        }
        fields.push(outcome.seeds.len().to_string());
        w.write_record(&fields)?;
    }
    finish(w, &path)
}

fn write_mfne(path: &Path, s: &RegularizedSolution) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["tau".to_string(), "gap".to_string(), "iterations".to_string()];
    header.extend((1..=s.pi_star.k()).map(|a| format!("pi_{a}")));
    w.write_record(&header)?;
    let mut fields = vec![s.tau.to_string(), s.gap.to_string(), s.iterations.to_string()];
    fields.extend(s.pi_star.weights().iter().map(|x| x.to_string()));
    w.write_record(&fields)?;
    finish(w, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub tau: f64,
    pub epsilon: Option<f64>,
    pub final_max_exploit: Option<(f64, f64)>,
    pub final_mean_dist: Option<(f64, f64)>,
    pub seeds: usize,
}

/// Runs `base` once per population size with "auto" hyperparameters,
/// writing each run to `N_<n>/` and a `summary.csv` beside them.
pub fn sweep_population(base: &ExperimentSpec, ns: &[usize]) -> Result<Vec<(SweepRow, ExperimentOutcome)>> {
    if ns.is_empty() {
        return Err(Error::config("Ns", "need at least one population size"));
    }
    if let Some(bad) = ns.iter().find(|n| **n < 2) {
        return Err(Error::config("Ns", format!("population size {bad} is below 2")));
    }
    create_dir(&base.out_dir)?;
    let mut results = Vec::with_capacity(ns.len());
    for &n in ns {
        let spec = ExperimentSpec {
            n,
            tau: Param::Auto,
            epsilon: Param::Auto,
            out_dir: base.out_dir.join(format!("N_{n}")),
            ..base.clone()
        };
        let outcome = run_experiment(&spec)?;
        let row = SweepRow {
            n,
            tau: outcome.schedule.tau,
            epsilon: outcome.schedule.epsilon,
            final_max_exploit: outcome.final_stats("max_exploitability"),
            final_mean_dist: outcome.final_stats("mean_dist_to_mfne"),
            seeds: outcome.seeds.len(),
        };
        results.push((row, outcome));
    }
    let path = base.out_dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for (row, _) in &results {
        w.write_record([
            row.n.to_string(),
            row.tau.to_string(),
            opt(row.epsilon),
            opt(row.final_max_exploit.map(|s| s.0)),
            opt(row.final_max_exploit.map(|s| s.1)),
            opt(row.final_mean_dist.map(|s| s.0)),
            opt(row.final_mean_dist.map(|s| s.1)),
            row.seeds.to_string(),
        ])?;
    }
    finish(w, &path)?;
    Ok(results)
}

/// Solves for the regularized equilibrium at the resolved `τ` and writes
/// `mfne.csv`.
pub fn solve_experiment_mfne(spec: &ExperimentSpec) -> Result<RegularizedSolution> {
    let operator = spec.operator.build(spec.n)?;
    let schedule = spec.resolve_schedule(&operator)?;
    let solution = solve_mfne(&operator, schedule.tau, &spec.solver)?;
    create_dir(&spec.out_dir)?;
    write_mfne(&spec.out_dir.join("mfne.csv"), &solution)?;
    Ok(solution)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCheck {
    pub name: String,
    pub declared_lipschitz: Option<f64>,
    pub declared_monotonicity: Option<f64>,
    pub estimated_lipschitz: f64,
    pub estimated_monotonicity: f64,
    pub declared_range: (f64, f64),
    pub range_violations: usize,
    pub samples: usize,
    pub pass: bool,
}

impl std::fmt::Display for OperatorCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        writeln!(f, "operator            {}", self.name)?;
        writeln!(f, "samples             {}", self.samples)?;
        writeln!(
            f,
            "lipschitz           estimated {:.6}  declared {}",
            self.estimated_lipschitz,
            show(self.declared_lipschitz)
        )?;
        writeln!(
            f,
            "monotonicity        estimated {:.6}  declared {}",
            self.estimated_monotonicity,
            show(self.declared_monotonicity)
        )?;
        writeln!(
            f,
            "range               [{:.6}, {:.6}]  violations {}",
            self.declared_range.0, self.declared_range.1, self.range_violations
        )?;
        write!(f, "verdict             {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Samples the operator to check its moduli and range against the declared
/// metadata. Fails when a sampled quantity contradicts the declaration or
/// the operator is not monotone.
pub fn check_operator(op: &PayoffOperator, samples: usize) -> OperatorCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let estimated_lipschitz = estimate_lipschitz(op, samples, &mut rng);
    let estimated_monotonicity = estimate_monotonicity(op, samples, &mut rng);
    let (lo, hi) = op.declared_range();
    let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    let mut out = vec![0.0; op.k()];
    let mut range_violations = 0;
    for s in 0..samples {
        let mu = if s < op.k() {
            SimplexPoint::vertex(op.k(), s)
        } else {
            SimplexPoint::random(op.k(), &mut rng)
        };
        op.eval_into(mu.weights(), &mut out);
        if out.iter().any(|v| !(*v >= lo - slack && *v <= hi + slack)) {
            range_violations += 1;
        }
    }
    let tol = |x: f64| 1e-9 * (1.0 + x.abs());
    let lipschitz_ok = op.lipschitz().is_none_or(|l| estimated_lipschitz <= l + tol(l));
    let monotone_ok = op.monotonicity().is_none_or(|m| estimated_monotonicity >= m - tol(m));
    let pass = lipschitz_ok && monotone_ok && estimated_monotonicity >= -1e-12 && range_violations == 0;
    OperatorCheck {
        name: op.kind().name().to_string(),
        declared_lipschitz: op.lipschitz(),
        declared_monotonicity: op.monotonicity(),
        estimated_lipschitz,
        estimated_monotonicity,
        declared_range: (lo, hi),
        range_violations,
        samples,
        pass,
    }
}

/// [`check_operator`] on the operator described by a configuration, with
/// the default sample count.
pub fn check_operator_config(cfg: &ConfigMap) -> Result<OperatorCheck> {
    let spec = OperatorSpec::from_config(cfg)?;
    let n = cfg.uint("game.N")?.unwrap_or(2);
    let op = spec.build(n).map_err(|e| Error::config("operator", e.to_string()))?;
    Ok(check_operator(&op, CHECK_SAMPLES))
}
