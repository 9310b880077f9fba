use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smfg::harness::{
    check_operator_config, run_experiment, solve_experiment_mfne, sweep_population, ConfigMap, ExperimentSpec,
};
use smfg::Error;

#[derive(Parser)]
#[command(name = "smfg", version, about = "Static mean-field game simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its CSVs.
    Run(Common),
    /// Run an experiment once per population size.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated population sizes.
        #[arg(long = "Ns", value_delimiter = ',', required = true)]
        ns: Vec<usize>,
    },
    /// Solve for the regularized equilibrium and write mfne.csv.
    SolveMfne(Common),
    /// Sample the configured operator and check its declared moduli.
    CheckOperator(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Run a single master seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    record_policies: bool,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self, overrides: &[(String, String)]) -> Result<ConfigMap, Error> {
        let mut cfg = ConfigMap::from_path(&self.config)?;
        for (key, value) in overrides {
            cfg.set_override(key, value);
        }
        if let Some(seed) = self.seed {
            cfg.set("seeds", toml::Value::Array(vec![toml::Value::Integer(seed as i64)]));
        }
        if let Some(out) = &self.out {
            cfg.set("output.dir", toml::Value::String(out.display().to_string()));
        }
        if self.record_policies {
            cfg.set("output.record_policies", toml::Value::Boolean(true));
        }
        if let Some(w) = self.workers {
            cfg.set("run.workers", toml::Value::Integer(w as i64));
        }
        Ok(cfg)
    }
}

/// Splits `--section.key=value` arguments from the ones clap handles.
fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let dotted = arg
            .strip_prefix("--")
            .and_then(|body| body.split_once('='))
            .filter(|(key, _)| key.contains('.'));
        match dotted {
            Some((key, value)) => overrides.push((key.to_string(), value.to_string())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<ExitCode, Error> {
    match command {
        Command::Run(common) => {
            let spec = ExperimentSpec::from_config(&common.load(overrides)?)?;
            let outcome = run_experiment(&spec)?;
            println!(
                "tau {} epsilon {} horizon {}",
                outcome.schedule.tau,
                outcome
                    .schedule
                    .epsilon
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| "-".into()),
                outcome.schedule.horizon
            );
            if let Some((m, s)) = outcome.final_stats("max_exploitability") {
                println!("final max exploitability {m:.6} (std {s:.6})");
            }
            if let Some((m, s)) = outcome.final_stats("mean_dist_to_mfne") {
                println!("final mean distance to equilibrium {m:.6} (std {s:.6})");
            }
            println!("wrote {}", spec.out_dir.display());
        }
        Command::Sweep { common, ns } => {
            let spec = ExperimentSpec::from_config(&common.load(overrides)?)?;
            for (row, _) in sweep_population(&spec, &ns)? {
                let show =
                    |v: Option<(f64, f64)>| v.map(|(m, s)| format!("{m:.6} ± {s:.6}")).unwrap_or_else(|| "-".into());
                println!(
                    "N {:>8}  max exploitability {}  mean distance {}",
                    row.n,
                    show(row.final_max_exploit),
                    show(row.final_mean_dist)
                );
            }
            println!("wrote {}", spec.out_dir.join("summary.csv").display());
        }
        Command::SolveMfne(common) => {
            let spec = ExperimentSpec::from_config(&common.load(overrides)?)?;
            let s = solve_experiment_mfne(&spec)?;
            let weights: Vec<String> = s.pi_star.weights().iter().map(|w| format!("{w:.10}")).collect();
            println!("tau {} gap {:e} iterations {}", s.tau, s.gap, s.iterations);
            println!("pi* = ({})", weights.join(", "));
        }
        Command::CheckOperator(common) => {
            let report = check_operator_config(&common.load(overrides)?)?;
            println!("{report}");
            if !report.pass {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match execute(cli.command, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConvergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
