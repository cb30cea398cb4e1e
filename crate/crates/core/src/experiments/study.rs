//! Replicated simulation studies.

use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelDefinition, ParameterVector};
use crate::regpath::run_path;
use crate::rng::stream;

use super::baseline::two_step;
use super::metrics::{mee, mse, rrmse, SelectionScores};
use super::scenario::{Method, Scenario};
use super::simulate::{simulate, Simulated};

/// One method applied to one simulated dataset.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub method: Method,
    /// `None` on success.
    pub error: Option<String>,
    pub lambda_hat: f64,
    pub support: Vec<usize>,
    pub scores: SelectionScores,
    /// Whether each row of `beta` has exactly its true support.
    pub row_correct: Vec<bool>,
    /// Named estimates (the two-step method only reports `beta`).
    pub estimates: Vec<(String, f64)>,
    /// Mean squared error over every `beta` entry.
    pub mse_beta: f64,
    pub mee: Vec<f64>,
}

impl ReplicateOutcome {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub truth: ParameterVector,
    /// Ordered by replicate, then by method as listed in the scenario.
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Aggregates over the successful replicates of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub correct_rate: f64,
    pub over_rate: f64,
    pub row_correct_rate: Vec<f64>,
    pub mse_beta: f64,
    pub mee: Vec<f64>,
}

/// Per-coordinate accuracy of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    pub method: Method,
    pub coord: String,
    pub truth: f64,
    pub mean: f64,
    pub rrmse: f64,
    pub mse: f64,
    pub n: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

impl StudyReport {
    fn ok_outcomes(&self, method: Method) -> impl Iterator<Item = &ReplicateOutcome> {
        self.outcomes.iter().filter(move |o| o.method == method && o.ok())
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        let rows = self.truth.beta.nrows();
        let q = self.truth.mu.len();
        self.scenario
            .methods
            .iter()
            .map(|&method| {
                let ok: Vec<&ReplicateOutcome> = self.ok_outcomes(method).collect();
                let n_failed = self.outcomes.iter().filter(|o| o.method == method && !o.ok()).count();
                let rate = |f: &dyn Fn(&ReplicateOutcome) -> bool| mean_of(ok.iter().map(|o| if f(o) { 1.0 } else { 0.0 }));
                MethodSummary {
                    method,
                    n_ok: ok.len(),
                    n_failed,
                    se: mean_of(ok.iter().map(|o| o.scores.se())),
                    sp: mean_of(ok.iter().map(|o| o.scores.sp())),
                    ac: mean_of(ok.iter().map(|o| o.scores.ac())),
                    correct_rate: rate(&|o| o.scores.correct()),
                    over_rate: rate(&|o| o.scores.over()),
                    row_correct_rate: (0..rows).map(|r| rate(&|o| o.row_correct[r])).collect(),
                    mse_beta: mean_of(ok.iter().map(|o| o.mse_beta)),
                    mee: (0..q).map(|k| mean_of(ok.iter().map(|o| o.mee[k]))).collect(),
                }
            })
            .collect()
    }

    /// Coordinates reported: everything except zero coefficients.
    pub fn estimate_summaries(&self) -> Vec<EstimateSummary> {
        let truth: Vec<(String, f64)> = self.truth.named_values();
        let layout = self.truth.layout();
        let mut out = Vec::new();
        for &method in &self.scenario.methods {
            for (idx, (name, t)) in truth.iter().enumerate() {
                if layout.is_penalized(idx) && *t == 0.0 {
                    continue;
                }
                let values: Vec<f64> = self
                    .ok_outcomes(method)
                    .filter_map(|o| o.estimates.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                out.push(EstimateSummary {
                    method,
                    coord: name.clone(),
                    truth: *t,
                    mean: mean_of(values.iter().copied()),
                    rrmse: rrmse(&values, *t),
                    mse: mse(&values, *t),
                    n: values.len(),
                });
            }
        }
        out
    }

    /// Writes `replicates.csv`, `selection.csv` and `estimates.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = |x: f64| format!("{x}");
        let join = |v: &[f64]| v.iter().map(|x| f(*x)).collect::<Vec<_>>().join(";");

        let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
        w.write_record([
            "method", "replicate", "status", "lambda_hat", "support_size", "support", "tp", "fp", "tn", "fn", "se", "sp",
            "ac", "correct", "over", "correct_rows", "mse_beta", "mee", "error",
        ])?;
        for o in &self.outcomes {
            let s = &o.scores;
            w.write_record([
                o.method.as_str().to_string(),
                (o.replicate + 1).to_string(),
                if o.ok() { "ok".into() } else { "failed".into() },
                f(o.lambda_hat),
                o.support.len().to_string(),
                o.support.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"),
                s.tp.to_string(),
                s.fp.to_string(),
                s.tn.to_string(),
                s.fn_.to_string(),
                f(s.se()),
                f(s.sp()),
                f(s.ac()),
                (s.correct() as u8).to_string(),
                (s.over() as u8).to_string(),
                o.row_correct.iter().map(|&c| (c as u8).to_string()).collect::<Vec<_>>().join(";"),
                f(o.mse_beta),
                join(&o.mee),
                o.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("selection.csv"))?;
        w.write_record([
            "method", "n_ok", "n_failed", "se", "sp", "ac", "correct_rate", "over_rate", "correct_rate_rows", "mse_beta", "mee",
        ])?;
        for s in self.summaries() {
            w.write_record([
                s.method.as_str().to_string(),
                s.n_ok.to_string(),
                s.n_failed.to_string(),
                f(s.se),
                f(s.sp),
                f(s.ac),
                f(s.correct_rate),
                f(s.over_rate),
                join(&s.row_correct_rate),
                f(s.mse_beta),
                join(&s.mee),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
        w.write_record(["method", "coord", "truth", "mean", "rrmse", "mse", "n"])?;
        for e in self.estimate_summaries() {
            w.write_record([
                e.method.as_str().to_string(),
                e.coord,
                f(e.truth),
                f(e.mean),
                f(e.rrmse),
                f(e.mse),
                e.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulated dataset of replicate `r`.
pub fn replicate_data(scenario: &Scenario, r: usize) -> Result<Simulated> {
    simulate(scenario, &mut stream(scenario.seed, &[r as u64, 0]))
}

fn row_correct(support: &[usize], truth: &[usize], rows: usize, p: usize) -> Vec<bool> {
    (0..rows)
        .map(|r| {
            let range = r * p..(r + 1) * p;
            let est: Vec<usize> = support.iter().copied().filter(|i| range.contains(i)).collect();
            let tru: Vec<usize> = truth.iter().copied().filter(|i| range.contains(i)).collect();
            est == tru
        })
        .collect()
}

fn run_method(scenario: &Scenario, model: &dyn ModelDefinition, sim: &Simulated, method: Method, r: usize) -> Result<(f64, Vec<usize>, DMatrix<f64>, Vec<(String, f64)>, DMatrix<f64>)> {
    let data: &Dataset = &sim.data;
    let theta0 = scenario.theta0(model, data)?;
    let tag = match method {
        Method::Integrated => 1,
        Method::TwoStep => 2,
    };
    let mut rng = stream(scenario.seed, &[r as u64, tag]);
    match method {
        Method::Integrated => {
            let res = run_path(model, data, None, &scenario.path, Some(&theta0), &mut rng)?;
            Ok((
                res.lambda_hat,
                res.support_final.clone(),
                res.theta_final.beta.clone(),
                res.theta_final.named_values(),
                res.latent_mean.clone(),
            ))
        }
        Method::TwoStep => {
            let res = two_step(model, data, &theta0, &scenario.baseline, &mut rng)?;
            let layout = sim.theta.layout();
            let beta_names = layout.beta_range().map(|i| layout.coord_name(i));
            let p = data.n_covariates();
            let estimates = beta_names
                .enumerate()
                .map(|(f, name)| (name, res.beta[(f / p, f % p)]))
                .collect();
            let lambda = res.lambdas.first().copied().unwrap_or(f64::NAN);
            Ok((lambda, res.support, res.beta, estimates, res.latent))
        }
    }
}

/// Runs every method on replicate `r`.
pub fn run_replicate(scenario: &Scenario, r: usize) -> Result<Vec<ReplicateOutcome>> {
    let model = scenario.model.build();
    let sim = replicate_data(scenario, r)?;
    let rows = sim.theta.beta.nrows();
    let p = scenario.n_covariates;
    let q = model.latent_dim();
    let mut out = Vec::new();
    for &method in &scenario.methods {
        let outcome = match run_method(scenario, model.as_ref(), &sim, method, r) {
            Ok((lambda_hat, support, beta, estimates, latent)) => ReplicateOutcome {
                replicate: r,
                method,
                error: None,
                lambda_hat,
                scores: SelectionScores::new(&support, &sim.support, rows * p),
                row_correct: row_correct(&support, &sim.support, rows, p),
                support,
                estimates,
                mse_beta: (&beta - &sim.theta.beta).norm_squared() / (rows * p) as f64,
                mee: mee(&latent, &sim.phi),
            },
            Err(e) if !e.is_usage() => {
                warn!("replicate {} method {}: {e}", r + 1, method.as_str());
                ReplicateOutcome {
                    replicate: r,
                    method,
                    error: Some(e.to_string()),
                    lambda_hat: f64::NAN,
                    support: vec![],
                    scores: SelectionScores::new(&[], &sim.support, rows * p),
                    row_correct: vec![false; rows],
                    estimates: vec![],
                    mse_beta: f64::NAN,
                    mee: vec![f64::NAN; q],
                }
            }
            Err(e) => return Err(e),
        };
        out.push(outcome);
    }
    Ok(out)
}

/// Runs `scenario.n_runs` replicates on `workers` threads. Every replicate
/// draws from its own seeded streams, so the report does not depend on the
/// worker count.
pub fn run_study(scenario: &Scenario, workers: usize) -> Result<StudyReport> {
    scenario.validate()?;
    let truth = scenario.true_theta()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<Vec<ReplicateOutcome>>> = pool.install(|| {
        (0..scenario.n_runs)
            .into_par_iter()
            .map(|r| {
                let out = run_replicate(scenario, r);
                info!("replicate {}/{} done", r + 1, scenario.n_runs);
                out
            })
            .collect()
    });
    let mut outcomes = Vec::new();
    for r in results {
        outcomes.extend(r?);
    }
    Ok(StudyReport {
        scenario: scenario.clone(),
        truth,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_row_correctness() {
        assert_eq!(row_correct(&[0, 1, 12], &[0, 1, 11], 2, 10), vec![true, false]);
        assert_eq!(row_correct(&[], &[], 2, 10), vec![true, true]);
    }
}
