use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use nlmem_core::experiments::{replicate_data, run_study, Scenario};
use nlmem_core::io;
use nlmem_core::model::{ModelDefinition, ModelKind, ToyModel};
use nlmem_core::optimizer::{asgd_fit, awpsg_fit};
use nlmem_core::oracle::{ols, simulate_toy, toy_exact_solution, Regime};
use nlmem_core::regpath::extract_support;
use nlmem_core::rng::stream;
use nlmem_core::{run_path, Dataset};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Command, DataArgs, GridArgs};

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate { scenario, seed, out } => simulate(&scenario, seed, &out),
        Command::Fit {
            input,
            lambda,
            seed,
            out,
            trajectory_every,
        } => fit(&input, lambda, seed, &out, trajectory_every),
        Command::Path {
            input,
            grid,
            lambda,
            seed,
            out,
        } => path(&input, &grid, lambda, seed, &out),
        Command::OracleCheck {
            scenario,
            lambda,
            inits,
            tol,
            seed,
            out,
        } => oracle_check(scenario.as_deref(), &lambda, inits, tol, seed, out.as_deref()),
        Command::Study {
            scenario,
            seed,
            out,
            workers,
            replicates,
        } => study(&scenario, seed, &out, workers, replicates),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Ok(Scenario::from_path(path)?)
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(nlmem_core::Error::from)
        .with_context(|| format!("cannot create output directory {}", out.display()))
}

/// Prints the summary and stores it as `summary.txt`.
fn finish(out: &Path, summary: &str) -> Result<()> {
    print!("{summary}");
    io::write_text(&out.join("summary.txt"), summary)?;
    Ok(())
}

fn scenario_for(input: &DataArgs) -> Result<Scenario> {
    match (&input.scenario, &input.model) {
        (Some(path), _) => load_scenario(path),
        (None, Some(name)) => Ok(Scenario::preset(name.parse::<ModelKind>()?)),
        (None, None) => Err(nlmem_core::Error::Config("either --scenario or --model is required".into()).into()),
    }
}

fn load_data(input: &DataArgs, scenario: &Scenario, model: &dyn ModelDefinition) -> Result<Dataset> {
    let constants: HashMap<String, f64> = scenario.constants.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let data = io::read_dataset(
        &input.data,
        &input.covariates,
        model.covariate_level(),
        model.constant_names(),
        &constants,
    )?;
    Ok(data)
}

fn simulate(scenario: &Path, seed: u64, out: &Path) -> Result<ExitCode> {
    let mut scenario = load_scenario(scenario)?;
    scenario.seed = seed;
    prepare_out(out)?;
    let sim = replicate_data(&scenario, 0)?;
    io::write_observations(&out.join("data.csv"), &sim.data)?;
    io::write_covariates(&out.join("covariates.csv"), sim.data.covariates())?;
    let mut w = csv::Writer::from_path(out.join("truth.csv"))?;
    w.write_record(["coord", "value"])?;
    for (name, value) in sim.truth_rows() {
        w.write_record([name, format!("{value}")])?;
    }
    w.flush()?;
    let summary = format!(
        "scenario {} ({}): {} individuals, {} observed values, {} covariates, true support size {}\n",
        scenario.name,
        scenario.model.as_str(),
        sim.data.n_individuals(),
        sim.data.n_observed(),
        sim.data.n_covariates(),
        sim.support.len()
    );
    finish(out, &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn fit(input: &DataArgs, lambda: f64, seed: u64, out: &Path, trajectory_every: usize) -> Result<ExitCode> {
    let scenario = scenario_for(input)?;
    let model = scenario.model.build();
    let data = load_data(input, &scenario, model.as_ref())?;
    prepare_out(out)?;
    let theta0 = scenario.theta0(model.as_ref(), &data)?;
    let mut cfg = scenario.path.penalized.with_lambda(lambda);
    cfg.trajectory_every = trajectory_every;
    let mut rng = stream(seed, &[]);
    let result = if lambda == 0.0 {
        asgd_fit(model.as_ref(), &data, &cfg, &scenario.path.sampler, &theta0, &mut rng)?
    } else {
        awpsg_fit(model.as_ref(), &data, &cfg, &scenario.path.sampler, &theta0, &mut rng)?
    };
    io::write_parameters(&out.join("parameters.csv"), &result.theta_hat)?;
    io::write_trajectory(&out.join("trajectory.csv"), &result)?;
    write_latent(&out.join("latent.csv"), &result.latent_mean)?;
    let support = extract_support(&result.theta_hat.beta, 0.0);
    let layout = result.theta_hat.layout();
    let names: Vec<String> = support
        .iter()
        .map(|&s| layout.coord_name(layout.beta_range().start + s))
        .collect();
    let rates = &result.acceptance_rates;
    let mean_rate = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    let mut summary = String::new();
    writeln!(summary, "model {} lambda {lambda}", model.name())?;
    writeln!(
        summary,
        "iterations {} converged {} mean acceptance {mean_rate:.3}",
        result.iterations_run, result.converged
    )?;
    writeln!(summary, "support ({}): {}", support.len(), names.join(" "))?;
    for (name, value) in result.theta_hat.named_values() {
        if !name.starts_with("beta") || value != 0.0 {
            writeln!(summary, "  {name} = {value}")?;
        }
    }
    finish(out, &summary)?;
    Ok(ExitCode::SUCCESS)
}

/// `id,phi1..phiq`: averaged latent draws per individual.
fn write_latent(path: &Path, latent: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((1..=latent.ncols()).map(|k| format!("phi{k}")));
    w.write_record(&header)?;
    for (i, row) in latent.row_iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn path(input: &DataArgs, grid: &GridArgs, lambda: Option<f64>, seed: u64, out: &Path) -> Result<ExitCode> {
    let mut scenario = scenario_for(input)?;
    if let Some(v) = grid.grid_max {
        scenario.path.grid.lambda_max = Some(v);
    }
    if let Some(v) = grid.grid_ratio {
        scenario.path.grid.ratio = v;
    }
    if let Some(v) = grid.grid_n {
        scenario.path.grid.n_points = v;
    }
    let model = scenario.model.build();
    let data = load_data(input, &scenario, model.as_ref())?;
    prepare_out(out)?;
    let theta0 = scenario.theta0(model.as_ref(), &data)?;
    let single = lambda.map(|l| vec![l]);
    let mut rng = stream(seed, &[]);
    let result = run_path(model.as_ref(), &data, single.as_deref(), &scenario.path, Some(&theta0), &mut rng)?;
    io::write_path_beta(&out.join("path_beta.csv"), &result)?;
    io::write_path_ebic(&out.join("path_ebic.csv"), &result)?;
    io::write_selected(&out.join("selected.csv"), &result)?;
    let layout = result.theta_final.layout();
    let mut summary = String::new();
    writeln!(summary, "model {}: {} penalty levels, {} failed", model.name(), result.records.len(), result.failures.len())?;
    for rec in &result.records {
        let mark = if rec.lambda == result.lambda_hat { "*" } else { " " };
        writeln!(
            summary,
            "{mark} lambda {:<12.6e} support {:>4}  ebic {:.3}",
            rec.lambda,
            rec.support.len(),
            rec.ebic
        )?;
    }
    let names: Vec<String> = result
        .support_final
        .iter()
        .map(|&s| layout.coord_name(layout.beta_range().start + s))
        .collect();
    writeln!(summary, "selected lambda {} support: {}", result.lambda_hat, names.join(" "))?;
    finish(out, &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn oracle_check(scenario: Option<&Path>, lambdas: &[f64], inits: usize, tol: f64, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let scenario = match scenario {
        Some(p) => load_scenario(p)?,
        None => Scenario::preset(ModelKind::Toy),
    };
    let spec = scenario.toy_spec()?;
    let mut rng = stream(seed, &[]);
    let toy = simulate_toy(&spec, &mut rng)?;
    let b_ols = ols(&toy.x, &toy.y);
    let truth = spec.true_support();
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut summary = String::new();
    let mut worst_overall = 0.0f64;
    let mut wrong_zeros_overall = 0usize;
    for &lambda in lambdas {
        let exact = toy_exact_solution(&b_ols, spec.sigma_sq, lambda);
        let exact_support: Vec<usize> = (0..spec.p).filter(|&l| exact[l] != 0.0).collect();
        let regime = Regime::classify(&exact_support, &truth);
        let cfg = scenario.path.penalized.with_lambda(lambda);
        for init in 0..inits.max(1) {
            let start: Vec<f64> = (0..spec.p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let theta0 = spec.theta(&start)?;
            let fit = awpsg_fit(&ToyModel, &toy.data, &cfg, &scenario.path.sampler, &theta0, &mut rng)?;
            let mut worst = 0.0f64;
            let mut wrong_zeros = 0;
            for l in 0..spec.p {
                let (e, g) = (exact[l], fit.theta_hat.beta[(0, l)]);
                if e == 0.0 {
                    if g != 0.0 {
                        wrong_zeros += 1;
                    }
                } else {
                    worst = worst.max(((g - e) / e).abs());
                }
                if e != 0.0 || g != 0.0 {
                    rows.push([format!("{lambda}"), (init + 1).to_string(), format!("beta[{}]", l + 1), format!("{e}"), format!("{g}")]);
                }
            }
            worst_overall = worst_overall.max(worst);
            wrong_zeros_overall += wrong_zeros;
            writeln!(
                summary,
                "lambda {lambda:<5} init {} regime {:<6} nonzero {:>3}  max rel error {worst:.3e}  spurious nonzeros {wrong_zeros}  iterations {}",
                init + 1,
                regime.as_str(),
                exact_support.len(),
                fit.iterations_run
            )?;
        }
    }
    let pass = worst_overall < tol && wrong_zeros_overall == 0;
    writeln!(
        summary,
        "{}: max relative error {worst_overall:.3e} (tolerance {tol}), spurious nonzeros {wrong_zeros_overall}",
        if pass { "PASS" } else { "FAIL" }
    )?;
    if let Some(out) = out {
        prepare_out(out)?;
        let mut w = csv::Writer::from_path(out.join("oracle_check.csv"))?;
        w.write_record(["lambda", "init", "coord", "oracle", "estimate"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
        finish(out, &summary)?;
    } else {
        print!("{summary}");
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn study(scenario: &Path, seed: u64, out: &Path, workers: usize, replicates: Option<usize>) -> Result<ExitCode> {
    let mut scenario = load_scenario(scenario)?;
    scenario.seed = seed;
    if let Some(r) = replicates {
        scenario.n_runs = r;
    }
    prepare_out(out)?;
    let report = run_study(&scenario, workers)?;
    report.write_csvs(out)?;
    let mut summary = String::new();
    writeln!(
        summary,
        "scenario {} ({}), {} replicates, censoring {}",
        scenario.name,
        scenario.model.as_str(),
        scenario.n_runs,
        scenario.censoring_rate
    )?;
    for s in report.summaries() {
        writeln!(
            summary,
            "{:<10} ok {:>3} failed {:>2}  Se {:.3} Sp {:.3} Ac {:.3}  correct {:.2} over {:.2}  mee {}",
            s.method.as_str(),
            s.n_ok,
            s.n_failed,
            s.se,
            s.sp,
            s.ac,
            s.correct_rate,
            s.over_rate,
            s.mee.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        )?;
    }
    finish(out, &summary)?;
    Ok(ExitCode::SUCCESS)
}
