//! Adaptive weighted proximal stochastic gradient (AWPSG) and its
//! unpenalized variant.
//!
//! Each iteration draws the latent variables at the current parameter,
//! computes the `1/N`-averaged gradient of the complete log-likelihood,
//! takes an AdaGrad-preconditioned ascent step and soft-thresholds the
//! regression coefficients with the per-coordinate weight of that step.
//!
//! The penalty level `lambda` is expressed on the scale of the total
//! log-likelihood, `log g(theta) - lambda * |beta|_1`. Because the gradient is
//! averaged over individuals, the proximal step uses `lambda / N`.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prior_mean_state, BetaTarget, Dataset, Evaluator, LatentState, ModelDefinition, ParameterVector};
use crate::sampler::{Sampler, SamplerConfig};

/// Proximal operator of `lambda |.|` with weight `s`:
/// `argmin_y lambda |y| + (s / 2) (y - x)^2`.
pub fn prox_weighted_l1(x: f64, s: f64, lambda: f64) -> f64 {
    let t = lambda / s;
    if x.abs() < t {
        0.0
    } else if x >= t {
        x - t
    } else {
        x + t
    }
}

/// Per-coordinate multipliers of the base step size, for parameters living
/// on very different scales. Empty vectors mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepScale {
    /// One entry per fixed effect.
    pub alpha: Vec<f64>,
    /// One entry per latent component; applies to `mu_k` and to the rows of
    /// `beta` regressing component `k`.
    pub latent: Vec<f64>,
    /// Rows of `beta` acting on the observation mean.
    pub observation: f64,
    /// Log-variance coordinates.
    pub variance: f64,
}

impl Default for StepScale {
    fn default() -> Self {
        StepScale {
            alpha: Vec::new(),
            latent: Vec::new(),
            observation: 1.0,
            variance: 1.0,
        }
    }
}

impl StepScale {
    /// Expands the multipliers to the flat layout of `model`.
    pub fn expand(&self, model: &dyn ModelDefinition, n_covariates: usize) -> Result<Vec<f64>> {
        let layout = model.layout(n_covariates);
        let pick = |v: &[f64], k: usize, what: &str, len: usize| -> Result<f64> {
            match v.len() {
                0 => Ok(1.0),
                l if l == len => Ok(v[k]),
                l => Err(Error::Config(format!("step_scale.{what} has {l} entries, expected {len}"))),
            }
        };
        let mut out = vec![self.variance; layout.len()];
        for (k, idx) in layout.alpha_range().enumerate() {
            out[idx] = pick(&self.alpha, k, "alpha", layout.fixed_dim)?;
        }
        for (k, idx) in layout.mu_range().enumerate() {
            out[idx] = pick(&self.latent, k, "latent", layout.latent_dim)?;
        }
        for (r, target) in model.beta_targets().iter().enumerate() {
            let s = match *target {
                BetaTarget::Latent(k) => pick(&self.latent, k, "latent", layout.latent_dim)?,
                BetaTarget::Observation => self.observation,
            };
            for c in 0..n_covariates {
                out[layout.beta_index(r, c)] = s;
            }
        }
        if out.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("step_scale entries must be positive".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwpsgConfig {
    pub gamma0: f64,
    pub adagrad_eps: f64,
    pub k_max: usize,
    pub lambda: f64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub averaging_fraction: f64,
    /// Any coordinate exceeding this magnitude aborts the fit.
    pub divergence_bound: f64,
    /// Record the iterate every this many iterations (0 disables).
    pub trajectory_every: usize,
    pub step_scale: StepScale,
}

impl Default for AwpsgConfig {
    fn default() -> Self {
        AwpsgConfig {
            gamma0: 0.5,
            adagrad_eps: 1e-8,
            k_max: 5000,
            lambda: 0.0,
            convergence_tol: 1e-4,
            convergence_window: 100,
            averaging_fraction: 0.25,
            divergence_bound: 1e8,
            trajectory_every: 0,
            step_scale: StepScale::default(),
        }
    }
}

impl AwpsgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) || !(self.adagrad_eps > 0.0) {
            return Err(Error::Config("gamma0 and adagrad_eps must be positive".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.averaging_fraction) {
            return Err(Error::Config("averaging_fraction must lie in [0, 1]".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::Config("convergence_window must be positive".into()));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        AwpsgConfig {
            lambda,
            ..self.clone()
        }
    }
}

/// AdaGrad accumulator `P_k^2 = sum_{s <= k} v_s^2` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionerState {
    pub accum: Vec<f64>,
}

impl PreconditionerState {
    pub fn new(dim: usize) -> Self {
        PreconditionerState { accum: vec![0.0; dim] }
    }

    pub fn update(&mut self, l: usize, v: f64) {
        self.accum[l] += v * v;
    }

    /// Effective step `gamma / (P_l + eps)`.
    pub fn step_size(&self, l: usize, gamma: f64, eps: f64) -> f64 {
        gamma / (self.accum[l].sqrt() + eps)
    }

    /// Effective step with the denominator floored at `floor`. Penalized
    /// coordinates use the per-individual penalty as floor, which bounds the
    /// soft-threshold width of one iteration by `gamma`. Without it a warm
    /// start at a stationary point (tiny gradient) gives a huge first step
    /// whose dead zone wipes out every active coefficient.
    pub fn step_size_floored(&self, l: usize, gamma: f64, eps: f64, floor: f64) -> f64 {
        gamma / (self.accum[l].sqrt() + eps).max(floor)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    /// `(iteration, flat iterate)` snapshots; see [`FitResult::trajectory_rows`].
    pub trajectory: Vec<(usize, Vec<f64>)>,
    pub iterations_run: usize,
    pub acceptance_rates: Vec<f64>,
    pub converged: bool,
    /// Last latent draw.
    pub latent: LatentState,
    /// Average of the latent draws over the averaging window.
    pub latent_mean: DMatrix<f64>,
}

impl FitResult {
    /// `(iteration, coordinate name, value)` with variances on their natural scale.
    pub fn trajectory_rows(&self) -> Vec<(usize, String, f64)> {
        let layout = self.theta_hat.layout();
        let var_start = layout.log_gamma_range().start;
        let mut rows = Vec::new();
        for (k, flat) in &self.trajectory {
            for (idx, &v) in flat.iter().enumerate() {
                let value = if idx >= var_start { v.exp() } else { v };
                rows.push((*k, layout.coord_name(idx), value));
            }
        }
        rows
    }
}

/// Starting parameter: the model's moment-based guess when it has one,
/// otherwise pooled moments of the observations; `beta = 0`.
pub fn default_theta0(model: &dyn ModelDefinition, data: &Dataset) -> Result<ParameterVector> {
    let p = data.n_covariates();
    let rows = model.beta_targets().len();
    if let Some(g) = model.initial_guess(data) {
        return ParameterVector::with_zero_beta(g.alpha, g.mu, rows, p, g.gamma_sq, g.sigma_sq);
    }
    let ys: Vec<f64> = data
        .individuals()
        .iter()
        .flat_map(|ind| ind.observed_indices().map(move |j| ind.y[j]))
        .collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).max(1e-8);
    let q = model.latent_dim();
    let mut mu = vec![0.0; q];
    mu[0] = mean;
    ParameterVector::with_zero_beta(vec![1.0; model.fixed_dim()], mu, rows, p, vec![var; q], var)
}

/// Penalized fit: Algorithm AWPSG at `cfg.lambda`.
pub fn awpsg_fit<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    data: &Dataset,
    cfg: &AwpsgConfig,
    sampler_cfg: &SamplerConfig,
    theta0: &ParameterVector,
    rng: &mut R,
) -> Result<FitResult> {
    let seed = rng.next_u64();
    fit(model, data, cfg, sampler_cfg, theta0, seed, true)
}

/// Unpenalized fit: the same loop without the proximal step (`lambda` ignored).
pub fn asgd_fit<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    data: &Dataset,
    cfg: &AwpsgConfig,
    sampler_cfg: &SamplerConfig,
    theta0: &ParameterVector,
    rng: &mut R,
) -> Result<FitResult> {
    let seed = rng.next_u64();
    fit(model, data, cfg, sampler_cfg, theta0, seed, false)
}

/// Fit driven by an explicit seed rather than a generator.
pub fn fit_seeded(
    model: &dyn ModelDefinition,
    data: &Dataset,
    cfg: &AwpsgConfig,
    sampler_cfg: &SamplerConfig,
    theta0: &ParameterVector,
    seed: u64,
    penalized: bool,
) -> Result<FitResult> {
    fit(model, data, cfg, sampler_cfg, theta0, seed, penalized)
}

fn fit(
    model: &dyn ModelDefinition,
    data: &Dataset,
    cfg: &AwpsgConfig,
    sampler_cfg: &SamplerConfig,
    theta0: &ParameterVector,
    seed: u64,
    penalized: bool,
) -> Result<FitResult> {
    cfg.validate()?;
    model.check_dataset(data)?;
    let p = data.n_covariates();
    let layout = model.layout(p);
    if theta0.layout() != layout {
        return Err(Error::InvalidInput(format!(
            "starting parameter layout {:?} does not match model layout {:?}",
            theta0.layout(),
            layout
        )));
    }
    let n = data.n_individuals();
    let q = layout.latent_dim;
    let free = model.free_mask(p);
    let scale = cfg.step_scale.expand(model, p)?;
    let threshold = cfg.lambda / n as f64;

    let mut theta = theta0.clone();
    let mut flat = theta.flatten();
    for idx in layout.beta_range() {
        if !free[idx] {
            flat[idx] = 0.0;
        }
    }
    theta.assign_flat(&flat);

    let mut sampler = Sampler::new(sampler_cfg, model, &theta, n, seed)?;
    let mut latent = prior_mean_state(model, &theta, data);
    let mut precond = PreconditionerState::new(layout.len());

    let window = ((cfg.averaging_fraction * cfg.k_max as f64).ceil() as usize).max(1);
    let mut tail: VecDeque<(Vec<f64>, DMatrix<f64>)> = VecDeque::with_capacity(window);
    let mut changes: VecDeque<f64> = VecDeque::with_capacity(cfg.convergence_window);
    let mut change_sum = 0.0;
    let mut trajectory = Vec::new();
    if cfg.trajectory_every > 0 {
        trajectory.push((0, flat.clone()));
    }
    let mut converged = false;
    let mut k_run = 0;

    for k in 1..=cfg.k_max {
        k_run = k;
        let grad = {
            let eval = Evaluator::new(model, data, &theta);
            sampler.step(&eval, &mut latent, k, cfg.k_max)?;
            eval.gradient(&latent)?
        };

        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for l in 0..flat.len() {
            let old = flat[l];
            norm_sq += old * old;
            if !free[l] {
                continue;
            }
            let v = grad[l];
            precond.update(l, v);
            let shrunk = penalized && layout.is_penalized(l);
            let floor = if shrunk { threshold } else { 0.0 };
            let step = precond.step_size_floored(l, cfg.gamma0 * scale[l], cfg.adagrad_eps, floor);
            let omega = old + step * v;
            let new = if shrunk {
                prox_weighted_l1(omega, 1.0 / step, threshold)
            } else {
                omega
            };
            if !new.is_finite() || new.abs() > cfg.divergence_bound {
                return Err(Error::Divergence {
                    iteration: k,
                    coord: layout.coord_name(l),
                    value: new,
                });
            }
            diff_sq += (new - old) * (new - old);
            flat[l] = new;
        }
        theta.assign_flat(&flat);

        if tail.len() == window {
            tail.pop_front();
        }
        tail.push_back((flat.clone(), latent.phi.clone()));
        if cfg.trajectory_every > 0 && k % cfg.trajectory_every == 0 {
            trajectory.push((k, flat.clone()));
        }

        let change = diff_sq.sqrt() / (norm_sq.sqrt() + 1e-12);
        changes.push_back(change);
        change_sum += change;
        if changes.len() > cfg.convergence_window {
            change_sum -= changes.pop_front().unwrap_or(0.0);
        }
        if changes.len() == cfg.convergence_window && change_sum / (cfg.convergence_window as f64) < cfg.convergence_tol
        {
            converged = true;
            break;
        }
    }

    let used = ((cfg.averaging_fraction * k_run as f64).ceil() as usize).clamp(1, tail.len());
    let recent: Vec<&(Vec<f64>, DMatrix<f64>)> = tail.iter().skip(tail.len() - used).collect();
    let mut averaged = vec![0.0; flat.len()];
    for l in 0..flat.len() {
        if penalized && layout.is_penalized(l) {
            // Majority-zero rule keeps exact sparsity.
            let nonzero: Vec<f64> = recent.iter().map(|(f, _)| f[l]).filter(|&x| x != 0.0).collect();
            averaged[l] = if 2 * nonzero.len() <= recent.len() {
                0.0
            } else {
                nonzero.iter().sum::<f64>() / nonzero.len() as f64
            };
        } else {
            averaged[l] = recent.iter().map(|(f, _)| f[l]).sum::<f64>() / used as f64;
        }
    }
    let mut latent_mean = DMatrix::zeros(n, q);
    for (_, phi) in &recent {
        latent_mean += phi;
    }
    latent_mean /= used as f64;

    let theta_hat = ParameterVector::unflatten(&layout, &averaged)?;
    Ok(FitResult {
        theta_hat,
        trajectory,
        iterations_run: k_run,
        acceptance_rates: sampler.acceptance_rates(&latent),
        converged,
        latent,
        latent_mean,
    })
}
