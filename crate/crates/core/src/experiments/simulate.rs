//! Synthetic data generators for the simulation scenarios.

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::model::{BetaTarget, CovariateLevel, Dataset, Individual, ModelDefinition, ModelKind, ParameterVector};
use crate::oracle::simulate_toy;
use crate::rng::stream;

use super::scenario::{CovariateLaw, Scenario};

/// A simulated dataset together with the values that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub theta: ParameterVector,
    /// `N x q` latent values.
    pub phi: DMatrix<f64>,
    /// Row-major flat indices of the true nonzero coefficients.
    pub support: Vec<usize>,
}

impl Simulated {
    /// `coord,value` rows: the parameter followed by every latent value.
    pub fn truth_rows(&self) -> Vec<(String, f64)> {
        let mut rows = self.theta.named_values();
        for i in 0..self.phi.nrows() {
            for k in 0..self.phi.ncols() {
                rows.push((format!("phi[{},{}]", i + 1, k + 1), self.phi[(i, k)]));
            }
        }
        rows
    }
}

/// Draws one dataset. The first draw seeds a separate censoring stream, so
/// changing the censoring rate leaves every observation value unchanged.
pub fn simulate<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Simulated> {
    scenario.validate()?;
    let censor_seed = rng.next_u64();
    let mut sim = match scenario.model {
        ModelKind::Toy => simulate_toy_scenario(scenario, rng)?,
        _ => simulate_nlmem(scenario, rng)?,
    };
    if scenario.censoring_rate > 0.0 {
        sim.data = censor(&sim.data, scenario.censoring_rate, scenario.censored_times, censor_seed)?;
    }
    Ok(sim)
}

/// Covariates drawn from the scenario's law.
pub fn draw_covariates<R: Rng + ?Sized>(law: &CovariateLaw, n: usize, p: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    match *law {
        CovariateLaw::Uniform { low, high } => {
            let u = Uniform::new(low, high).map_err(|e| Error::Config(e.to_string()))?;
            Ok(DMatrix::from_fn(n, p, |_, _| u.sample(rng)))
        }
        CovariateLaw::Bernoulli { p: prob, standardize } => {
            let b = Bernoulli::new(prob).map_err(|e| Error::Config(e.to_string()))?;
            let mut x = DMatrix::from_fn(n, p, |_, _| if b.sample(rng) { 1.0 } else { 0.0 });
            if standardize {
                standardize_columns(&mut x);
            }
            Ok(x)
        }
        CovariateLaw::Orthogonal => Err(Error::Config("the orthogonal law needs the toy generator".into())),
    }
}

/// Centres each column and scales it to unit population variance; constant
/// columns become zero.
pub fn standardize_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mut constant = 0;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        } else {
            col.fill(0.0);
            constant += 1;
        }
    }
    if constant > 0 {
        warn!("{constant} covariate columns are constant and were set to zero");
    }
}

fn simulate_nlmem<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Simulated> {
    let model = scenario.model.build();
    let (n, p) = (scenario.n_individuals, scenario.n_covariates);
    let theta = scenario.true_theta()?;
    let x = draw_covariates(&scenario.covariates, n, p, rng)?;
    let q = model.latent_dim();
    let shift = latent_shift(model.as_ref(), &theta, &x);
    let sd: Vec<f64> = theta.gamma_sq_vec().iter().map(|g| g.sqrt()).collect();
    let mut phi = DMatrix::zeros(n, q);
    for i in 0..n {
        for k in 0..q {
            let z: f64 = rng.sample(StandardNormal);
            phi[(i, k)] = theta.mu[k] + shift[(i, k)] + sd[k] * z;
        }
    }
    let consts: Vec<f64> = model
        .constant_names()
        .iter()
        .map(|name| scenario.constants[*name])
        .collect();
    let s = theta.sigma_sq().sqrt();
    let mut individuals = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = phi.row(i).iter().copied().collect();
        let mut y = Vec::with_capacity(scenario.times.len());
        for (j, &t) in scenario.times.iter().enumerate() {
            let m = model.mean(&theta.alpha, t, &row, &consts);
            if !m.is_finite() {
                return Err(Error::Domain {
                    individual: i,
                    observation: j,
                });
            }
            let e: f64 = rng.sample(StandardNormal);
            y.push(m + s * e);
        }
        let mut ind = Individual::new(scenario.times.clone(), y);
        ind.constants = consts.clone();
        individuals.push(ind);
    }
    let names = model.constant_names().iter().map(|s| s.to_string()).collect();
    let data = Dataset::new(individuals, x, CovariateLevel::Individual, names)?;
    Ok(Simulated {
        data,
        theta,
        phi,
        support: scenario.true_support(),
    })
}

/// `N x q` shift `X_i beta_r` added to the latent mean of each targeted component.
fn latent_shift(model: &dyn ModelDefinition, theta: &ParameterVector, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut shift = DMatrix::zeros(x.nrows(), model.latent_dim());
    for (r, target) in model.beta_targets().iter().enumerate() {
        if let BetaTarget::Latent(k) = *target {
            let xb = x * theta.beta.row(r).transpose();
            for i in 0..x.nrows() {
                shift[(i, k)] += xb[i];
            }
        }
    }
    shift
}

fn simulate_toy_scenario<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Simulated> {
    let spec = scenario.toy_spec()?;
    let toy = simulate_toy(&spec, rng)?;
    let theta = spec.theta(spec.beta_vector().as_slice())?;
    Ok(Simulated {
        data: toy.data,
        theta,
        phi: DMatrix::from_column_slice(spec.n, 1, toy.phi.as_slice()),
        support: spec.true_support(),
    })
}

/// Keeps only the first `kept` observations of `floor(rate N)` individuals
/// chosen uniformly at random.
pub fn censor(data: &Dataset, rate: f64, kept: usize, seed: u64) -> Result<Dataset> {
    let n = data.n_individuals();
    let count = (rate * n as f64).floor() as usize;
    let mut rng = stream(seed, &[]);
    let chosen = sample(&mut rng, n, count);
    let mut masks: Vec<Vec<bool>> = data.individuals().iter().map(|ind| ind.observed.clone()).collect();
    for i in chosen.iter() {
        for (j, m) in masks[i].iter_mut().enumerate() {
            if j >= kept {
                *m = false;
            }
        }
    }
    data.clone().with_observed(masks)
}
