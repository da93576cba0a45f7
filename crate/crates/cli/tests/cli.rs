use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn expdelay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expdelay"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn example(n_steps: usize, mc: &str) -> String {
    format!(
        r#"{{"market": {{"type": "example", "mu": 0.0, "sigma2": 1.0}},
            "horizon_T": 1.0, "n_steps": {n_steps},
            "delay": {{"type": "constant_lag", "delta": 0.25}}{mc}}}"#
    )
}

/// Tabulated market with `f̃ = 0` on `n` steps; returns the config path and `ã`.
fn covariance_free(dir: &Path, n: usize) -> (PathBuf, Vec<f64>) {
    let a: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect();
    let row = a.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
    fs::write(dir.join("a.csv"), format!("{row}\n")).unwrap();
    let zeros = vec!["0"; n].join(",");
    fs::write(dir.join("f.csv"), format!("{zeros}\n").repeat(n)).unwrap();
    let cfg = format!(
        r#"{{"market": {{"type": "tabulated", "a_tilde": "a.csv", "f_tilde": "f.csv"}},
            "horizon_T": 2.0, "n_steps": {n},
            "delay": {{"type": "constant_lag", "delta": 0.5}}}}"#
    );
    (write_config(dir, "flat.json", &cfg), a)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_matches_the_closed_form_example() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(400, ""));
    let out = dir.path().join("run");
    let o = expdelay(&["solve", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sol = read_json(&out.join("solution.json"));
    let v = sol["value"]["value"].as_f64().unwrap();
    let oracle = sol["oracle"]["oracle_value"].as_f64().unwrap();
    assert!(((v - oracle) / oracle).abs() < 1e-2, "{v} vs {oracle}");
    assert_eq!(sol["scenario"]["n_steps"], 400);
    assert_eq!(sol["diagnostics"]["support_overlap"], 0);
    for f in ["prepared.json", "kappa.csv", "g.csv", "gtilde.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let kappa = fs::read_to_string(out.join("kappa.csv")).unwrap();
    assert!(kappa.starts_with("# scenario_hash="));
    assert_eq!(kappa.lines().count(), 401);
}

#[test]
fn covariance_free_market_has_the_plain_value() {
    let dir = TempDir::new().unwrap();
    let (cfg, a) = covariance_free(dir.path(), 40);
    let out = dir.path().join("run");
    let o = expdelay(&["solve", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h = 2.0 / 40.0;
    let expected = -(-0.5 * h * a.iter().map(|x| x * x).sum::<f64>()).exp();
    let v = read_json(&out.join("solution.json"))["value"]["value"].as_f64().unwrap();
    assert!((v - expected).abs() <= 1e-10, "{v} vs {expected}");
}

#[test]
fn invalid_alpha_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        &example(32, r#", "mc": {"n_paths": 100, "seed": 1, "alpha": -1.0}"#),
    );
    let out = dir.path().join("run");
    let o = expdelay(&["solve", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let diag: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(diag["error"], "validation");
    assert_eq!(read_json(&out.join("error.json")), diag);
}

#[test]
fn inadmissible_kernel_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let n = 16;
    fs::write(dir.path().join("a.csv"), format!("{}\n", vec!["0"; n].join(","))).unwrap();
    // h·f̃ = 2·I has spectrum above one
    let rows: String = (0..n)
        .map(|i| (0..n).map(|j| if i == j { "32" } else { "0" }).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(dir.path().join("f.csv"), rows).unwrap();
    let cfg = write_config(
        dir.path(),
        "big.json",
        r#"{"market": {"type": "tabulated", "a_tilde": "a.csv", "f_tilde": "f.csv"},
            "horizon_T": 1.0, "n_steps": 16, "delay": {"type": "constant_lag", "delta": 0.25}}"#,
    );
    let o = expdelay(&["solve", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn convergence_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn oracle_gap_shrinks_across_levels() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(100, ""));
    let out = dir.path().join("run");
    let o = expdelay(&[
        "convergence",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--levels",
        "100,200,400,800",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = convergence_rows(&fs::read_to_string(out.join("convergence.csv")).unwrap());
    assert_eq!(rows.len(), 4);
    let gaps: Vec<f64> = rows.iter().map(|r| r[8].parse().unwrap()).collect();
    for w in gaps.windows(2) {
        assert!(w[0] / w[1] >= 1.5, "gaps {gaps:?}");
    }
    let refinement: Vec<f64> = rows[1..].iter().map(|r| r[6].parse().unwrap()).collect();
    for w in refinement.windows(2) {
        assert!(w[1] < w[0], "refinement gaps {refinement:?}");
    }
    assert!(rows[0][6].is_empty());
}

#[test]
fn single_level_gives_one_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(64, ""));
    let out = dir.path().join("run");
    let o = expdelay(&["convergence", "--config", path_str(&cfg), "--out", path_str(&out), "--levels", "32"]);
    assert!(o.status.success());
    let rows = convergence_rows(&fs::read_to_string(out.join("convergence.csv")).unwrap());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "32");
}

#[test]
fn covariance_free_convergence_is_exact() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = covariance_free(dir.path(), 16);
    let out = dir.path().join("run");
    let o = expdelay(&["convergence", "--config", path_str(&cfg), "--out", path_str(&out), "--levels", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = convergence_rows(&fs::read_to_string(out.join("convergence.csv")).unwrap());
    assert_eq!(rows.len(), 1);
    assert!(rows[0][8].parse::<f64>().unwrap() <= 1e-10);
}

#[test]
fn decreasing_levels_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(64, ""));
    let o = expdelay(&[
        "convergence",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("run")),
        "--levels",
        "64,32",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

const SMALL_MC: &str = r#", "mc": {"n_paths": 20000, "seed": 5, "n_perturbations": 8}"#;

fn validate(cfg: &Path, out: &Path, extra: &[&str]) -> (Output, Value) {
    let mut args = vec!["validate", "--config", path_str(cfg), "--out", path_str(out)];
    args.extend_from_slice(extra);
    let o = expdelay(&args);
    let report = read_json(&out.join("validate.json"));
    (o, report)
}

#[test]
fn validation_passes_and_survives_a_seed_change() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(64, SMALL_MC));
    for (seed, name) in [(None, "a"), (Some("77"), "b")] {
        let extra: Vec<&str> = seed.map(|s| vec!["--seed", s]).unwrap_or_default();
        let (o, report) = validate(&cfg, &dir.path().join(name), &extra);
        assert!(o.status.success(), "{report}");
        assert_eq!(report["pass"], true);
        for check in ["utility", "perturbation", "risk_aversion", "rn_normalization"] {
            assert_eq!(report[check]["pass"], true, "{check}");
        }
        if let Some(s) = seed {
            assert_eq!(report["seed"].to_string(), s);
        }
    }
}

#[test]
fn zero_strategy_has_utility_minus_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(32, SMALL_MC));
    let (o, report) = validate(&cfg, &dir.path().join("z"), &["--zero-strategy"]);
    assert!(o.status.success());
    assert_eq!(report["utility"]["strategy"], "zero");
    assert_eq!(report["utility"]["estimate"]["mean"].as_f64(), Some(-1.0));
    assert_eq!(report["utility"]["estimate"]["std_error"].as_f64(), Some(0.0));
}

#[test]
fn validate_without_mc_section_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(32, ""));
    let o = expdelay(&["validate", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_needs_the_example_market() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = covariance_free(dir.path(), 16);
    let o = expdelay(&["oracle", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), "ex.json", &example(32, ""));
    let out = dir.path().join("ok");
    let o = expdelay(&["oracle", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success());
    let v = read_json(&out.join("oracle.json"))["oracle"]["value"].as_f64().unwrap();
    assert!((v + 0.9365782735209847).abs() < 1e-9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(48, SMALL_MC));
    let runs: Vec<PathBuf> = ["one", "two"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        for cmd in ["solve", "dump-kernels", "validate", "oracle"] {
            let o = expdelay(&[cmd, "--config", path_str(&cfg), "--out", path_str(out)]);
            assert!(o.status.success(), "{cmd}");
        }
        let o = expdelay(&["convergence", "--config", path_str(&cfg), "--out", path_str(out), "--levels", "24,48"]);
        assert!(o.status.success());
    }
    let mut names: Vec<_> = fs::read_dir(&runs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10, "{names:?}");
    for name in names {
        let a = fs::read(runs[0].join(&name)).unwrap();
        let b = fs::read(runs[1].join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn default_output_directory_is_relative_to_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ex.json", &example(32, "").replacen('{', r#"{"outputs": "results", "#, 1));
    let o = expdelay(&["solve", "--config", path_str(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("results/solution.json").exists());
}
