use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
algorithm = "trpa-full"
seeds = [7]

[game]
N = 30
K = 3
sigma = 0.1

[operator]
kind = "beach_bar"

[schedule]
tau = 0.5
horizon = 32
"#;

fn smfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smfg")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = smfg(&["run", &config, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed = fs::read_to_string(out.join("seed_3.csv")).unwrap();
    assert!(seed.starts_with("time_index,rounds_elapsed,max_exploitability"));
    assert_eq!(seed.lines().count(), 1 + 7);
    assert!(out.join("aggregate.csv").exists());
    assert!(out.join("mfne.csv").exists());
}

#[test]
fn dotted_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = smfg(&["run", &config, "--out", out.to_str().unwrap(), "--schedule.horizon=4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed = fs::read_to_string(out.join("seed_7.csv")).unwrap();
    let last = seed.lines().last().unwrap();
    assert!(last.starts_with("4,4,"), "{last}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let o = smfg(&["run", &config, "--game.N=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("game.N"));
    let o = smfg(&["run", &dir.path().join("missing.toml").display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = smfg(&[
        "solve-mfne",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--solver.max_iter=2",
        "--solver.tol=1e-15",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = smfg(&["solve-mfne", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("mfne.csv").exists());
}

#[test]
fn check_operator_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let o = smfg(&["check-operator", &config]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let anti = "[game]\nN = 10\n\n[operator]\nkind = \"affine\"\nM = [[1.0, 0.0], [0.0, 1.0]]\nb = [0.0, 0.0]\n";
    let config = write_config(dir.path(), anti);
    let o = smfg(&["check-operator", &config]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn sweep_writes_a_summary_per_population() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("sweep");
    let o = smfg(&["sweep", &config, "--Ns=10,20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,") && lines[2].starts_with("20,"));
    assert!(out.join("N_10").join("seed_7.csv").exists());
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            smfg::harness::ExperimentSpec::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
