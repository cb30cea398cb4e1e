use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nlmem_core::asgd_fit;
use nlmem_core::experiments::Scenario;
use nlmem_core::io::read_dataset;
use nlmem_core::rng::stream;
use tempfile::TempDir;

const SMALL_LINEAR: &str = r#"
model = "linear"
name = "small"
n_individuals = 30
n_covariates = 10
n_runs = 2

[path]
mc_draws = 200

[path.penalized]
k_max = 300

[path.refit]
k_max = 300

[path.grid]
n_points = 4
"#;

fn nlmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlmem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenario_file(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("small.toml");
    fs::write(&path, SMALL_LINEAR).unwrap();
    path
}

fn simulate_into(dir: &TempDir, name: &str, seed: &str) -> PathBuf {
    let scenario = scenario_file(dir);
    let out = dir.path().join(name);
    let o = nlmem(&["simulate", "--scenario", path_str(&scenario), "--seed", seed, "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = dir.path().join("out");
    let o = nlmem(&["simulate", "--scenario", path_str(&missing), "--seed", "1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn covariate_row_mismatch_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(&dir, "sim", "3");
    let cov = fs::read_to_string(sim.join("covariates.csv")).unwrap();
    let truncated: Vec<&str> = cov.lines().take(cov.lines().count() - 1).collect();
    let short = dir.path().join("short.csv");
    fs::write(&short, truncated.join("\n") + "\n").unwrap();
    let scenario = scenario_file(&dir);
    let o = nlmem(&[
        "fit",
        "--data",
        path_str(&sim.join("data.csv")),
        "--covariates",
        path_str(&short),
        "--scenario",
        path_str(&scenario),
        "--out",
        path_str(&dir.path().join("fit")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_is_reproducible_and_writes_every_observation() {
    let dir = TempDir::new().unwrap();
    let a = simulate_into(&dir, "a", "11");
    let b = simulate_into(&dir, "b", "11");
    for file in ["data.csv", "covariates.csv", "truth.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(csv_rows(&a.join("data.csv")).len(), 30 * 10);
    assert_eq!(csv_rows(&a.join("covariates.csv")).len(), 30);
    let c = simulate_into(&dir, "c", "12");
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn unpenalized_fit_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(&dir, "sim", "5");
    let scenario_path = scenario_file(&dir);
    let out = dir.path().join("fit");
    let o = nlmem(&[
        "fit",
        "--data",
        path_str(&sim.join("data.csv")),
        "--covariates",
        path_str(&sim.join("covariates.csv")),
        "--scenario",
        path_str(&scenario_path),
        "--seed",
        "4",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let scenario = Scenario::from_path(&scenario_path).unwrap();
    let model = scenario.model.build();
    let data = read_dataset(
        &sim.join("data.csv"),
        &sim.join("covariates.csv"),
        model.covariate_level(),
        model.constant_names(),
        &Default::default(),
    )
    .unwrap();
    let theta0 = scenario.theta0(model.as_ref(), &data).unwrap();
    let cfg = scenario.path.penalized.with_lambda(0.0);
    let fit = asgd_fit(model.as_ref(), &data, &cfg, &scenario.path.sampler, &theta0, &mut stream(4, &[])).unwrap();
    let written = csv_rows(&out.join("parameters.csv"));
    let expected = fit.theta_hat.named_values();
    assert_eq!(written.len(), expected.len());
    for (row, (name, value)) in written.iter().zip(&expected) {
        assert_eq!(&row[0], name);
        let got: f64 = row[1].parse().unwrap();
        assert!((got - value).abs() <= 1e-12 * value.abs().max(1.0), "{name}: {got} vs {value}");
    }
    assert!(out.join("trajectory.csv").exists());
    assert_eq!(csv_rows(&out.join("latent.csv")).len(), 30);
}

#[test]
fn single_lambda_path_selects_it() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(&dir, "sim", "6");
    let scenario = scenario_file(&dir);
    let out = dir.path().join("path");
    let o = nlmem(&[
        "path",
        "--data",
        path_str(&sim.join("data.csv")),
        "--covariates",
        path_str(&sim.join("covariates.csv")),
        "--scenario",
        path_str(&scenario),
        "--lambda",
        "5",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let selected = csv_rows(&out.join("selected.csv"));
    let lambda_hat = selected.iter().find(|r| r[0] == "lambda_hat").unwrap();
    assert_eq!(lambda_hat[1].parse::<f64>().unwrap(), 5.0);
    assert_eq!(csv_rows(&out.join("path_ebic.csv")).len(), 1);
}

#[test]
fn oracle_check_passes_on_the_toy_model() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("oracle");
    let o = nlmem(&["oracle-check", "--inits", "1", "--out", path_str(&out)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains("PASS"));
    assert!(out.join("oracle_check.csv").exists());
}

#[test]
fn study_writes_the_three_tables() {
    let dir = TempDir::new().unwrap();
    let scenario = scenario_file(&dir);
    let out = dir.path().join("study");
    let o = nlmem(&["study", "--scenario", path_str(&scenario), "--seed", "2", "--replicates", "1", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("replicates.csv")).len(), 1);
    assert_eq!(csv_rows(&out.join("selection.csv")).len(), 1);
    assert!(out.join("estimates.csv").exists());
}
