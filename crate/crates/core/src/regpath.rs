//! Regularization path: penalized fits over a log-spaced grid, maximum
//! likelihood refits on each support, Monte-Carlo marginal likelihood and
//! extended BIC selection.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{Dataset, Evaluator, ModelDefinition, ParameterVector, RestrictedModel};
use crate::optimizer::{default_theta0, fit_seeded, AwpsgConfig};
use crate::rng::{derive_seed, individual_streams};
use crate::sampler::{Sampler, SamplerConfig};

const TAG_PENALIZED: u64 = 1;
const TAG_REFIT: u64 = 2;
const TAG_MC: u64 = 3;
const TAG_PILOT: u64 = 4;
const TAG_SCORE: u64 = 5;

/// `n_points` values from `lambda_max` down to `lambda_max * ratio`, evenly
/// spaced on the log scale.
pub fn lambda_grid(lambda_max: f64, ratio: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) || !(ratio > 0.0 && ratio < 1.0) || n_points < 2 {
        return Err(Error::Config(
            "grid needs lambda_max > 0, 0 < ratio < 1 and at least two points".into(),
        ));
    }
    let step = ratio.ln() / (n_points - 1) as f64;
    let mut grid: Vec<f64> = (0..n_points).map(|t| lambda_max * (step * t as f64).exp()).collect();
    grid[n_points - 1] = lambda_max * ratio;
    Ok(grid)
}

/// Row-major flat indices of the entries of `beta` with `|beta| > zero_tol`.
pub fn extract_support(beta: &DMatrix<f64>, zero_tol: f64) -> Vec<usize> {
    let p = beta.ncols();
    let mut s = Vec::new();
    for r in 0..beta.nrows() {
        for c in 0..p {
            if beta[(r, c)].abs() > zero_tol {
                s.push(r * p + c);
            }
        }
    }
    s
}

/// Monte-Carlo estimate of the marginal log-likelihood with its delta-method
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub loglik: f64,
    pub std_error: f64,
}

/// `sum_i log((1/M) sum_m prod_j p(Y_ij | phi_i^(m)))` with `phi_i^(m)` drawn
/// from the prior `N(mu + X_i beta, Gamma)`.
pub fn mc_marginal_loglik<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    data: &Dataset,
    theta: &ParameterVector,
    draws: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let seed = rng.next_u64();
    mc_marginal_loglik_seeded(model, data, theta, draws, seed)
}

pub fn mc_marginal_loglik_seeded(
    model: &dyn ModelDefinition,
    data: &Dataset,
    theta: &ParameterVector,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    if draws == 0 {
        return Err(Error::Config("Monte-Carlo draw count must be positive".into()));
    }
    let eval = Evaluator::new(model, data, theta);
    let q = model.latent_dim();
    let sd: Vec<f64> = eval.gamma_sq().iter().map(|g| g.sqrt()).collect();
    let mut streams = individual_streams(seed, data.n_individuals());
    let mut logw = vec![0.0; draws];
    let mut phi = vec![0.0; q];
    let mut total = 0.0;
    let mut var = 0.0;
    for (i, rng) in streams.iter_mut().enumerate() {
        let mean = eval.prior_mean(i);
        for lw in logw.iter_mut() {
            for k in 0..q {
                let z: f64 = rng.sample(StandardNormal);
                phi[k] = mean[k] + sd[k] * z;
            }
            *lw = match eval.obs_loglik(i, &phi) {
                Ok(v) => v,
                Err(Error::Domain { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightUnderflow(i));
        }
        let m = draws as f64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &lw in &logw {
            let w = (lw - max).exp();
            sum += w;
            sum_sq += w * w;
        }
        let mean_w = sum / m;
        total += max + mean_w.ln();
        if draws > 1 {
            let var_w = (sum_sq / m - mean_w * mean_w).max(0.0) * m / (m - 1.0);
            var += var_w / (m * mean_w * mean_w);
        }
    }
    Ok(McEstimate {
        loglik: total,
        std_error: var.sqrt(),
    })
}

/// `ln C(n, k)` through the log-gamma function.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `-2 loglik + k ln(n_obs) + 2 ln C(p, k)`.
pub fn ebic(loglik: f64, support_size: usize, n_obs: usize, p: usize) -> f64 {
    -2.0 * loglik + support_size as f64 * (n_obs as f64).ln() + 2.0 * ln_binomial(p, support_size)
}

/// Reduced problem on a support of flat `beta` indices.
#[derive(Debug, Clone)]
pub struct Restriction {
    /// Original covariate columns kept, ascending.
    pub columns: Vec<usize>,
    /// Row-major mask over the reduced `beta` of the entries that may move.
    pub mask: Vec<bool>,
    pub data: Dataset,
    rows: usize,
    p: usize,
}

impl Restriction {
    /// Maps a full parameter to the reduced layout (entries outside the
    /// support set to zero).
    pub fn reduce_theta(&self, theta: &ParameterVector) -> ParameterVector {
        let width = self.data.n_covariates();
        let mut beta = DMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            for (c, &orig) in self.columns.iter().enumerate() {
                if self.mask[r * width + c] {
                    beta[(r, c)] = theta.beta[(r, orig)];
                }
            }
        }
        let mut out = theta.clone();
        out.beta = beta;
        out
    }

    /// Maps a reduced parameter back to the full layout.
    pub fn expand_theta(&self, theta: &ParameterVector) -> ParameterVector {
        let mut beta = DMatrix::zeros(self.rows, self.p);
        for r in 0..self.rows {
            for (c, &orig) in self.columns.iter().enumerate() {
                beta[(r, orig)] = theta.beta[(r, c)];
            }
        }
        let mut out = theta.clone();
        out.beta = beta;
        out
    }
}

/// Restricts `model` and `data` to the covariates of `support`.
pub fn restrict_model<'a>(
    model: &'a dyn ModelDefinition,
    data: &Dataset,
    support: &[usize],
) -> Result<(RestrictedModel<'a>, Restriction)> {
    let p = data.n_covariates();
    let rows = model.beta_targets().len();
    if let Some(&bad) = support.iter().find(|&&s| s >= rows * p) {
        return Err(Error::InvalidInput(format!("support index {bad} out of range")));
    }
    let mut columns: Vec<usize> = support.iter().map(|&s| s % p).collect();
    columns.sort_unstable();
    columns.dedup();
    let reduced = data.select_columns(&columns)?;
    let width = reduced.n_covariates();
    let mut mask = vec![false; rows * width];
    for &s in support {
        let (r, orig) = (s / p, s % p);
        let c = columns.binary_search(&orig).expect("column present");
        mask[r * width + c] = true;
    }
    let restricted = RestrictedModel::new(model, mask.clone());
    Ok((
        restricted,
        Restriction {
            columns,
            mask,
            data: reduced,
            rows,
            p,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Largest penalty; found by pilot fits when absent.
    pub lambda_max: Option<f64>,
    pub ratio: f64,
    pub n_points: usize,
    /// Bisection fits used to locate the smallest all-zero penalty.
    pub pilot_fits: usize,
    /// Sampler iterations used to estimate the score at the null model.
    pub score_draws: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lambda_max: None,
            ratio: 1e-3,
            n_points: 50,
            pilot_fits: 5,
            score_draws: 200,
        }
    }
}

/// Order in which penalty levels are visited.
///
/// When the variances are estimated jointly with `beta` the penalized
/// criterion is not convex: starting from the null model, every level above
/// the null score stays at zero, and once the strong coefficients enter the
/// latent variance collapses and the support jumps. The ascending sweep
/// starts dense at the smallest level and raises the penalty with warm
/// starts until the support is empty, following the small-variance branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub penalized: AwpsgConfig,
    pub refit: AwpsgConfig,
    pub sampler: SamplerConfig,
    pub mc_draws: usize,
    pub grid: GridConfig,
    pub zero_tol: f64,
    /// Supports larger than this are not refitted; a descending sweep stops
    /// at the first one.
    pub max_support: Option<usize>,
    pub warm_start: bool,
    pub sweep: Sweep,
    /// Ascending sweep: levels allowed above the top of the grid while the
    /// support is still nonempty.
    pub ascent_limit: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            penalized: AwpsgConfig::default(),
            refit: AwpsgConfig::default(),
            sampler: SamplerConfig::default(),
            mc_draws: 5000,
            grid: GridConfig::default(),
            zero_tol: 0.0,
            max_support: None,
            warm_start: true,
            sweep: Sweep::Descending,
            ascent_limit: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathRecord {
    pub lambda: f64,
    pub theta_pen: ParameterVector,
    pub support: Vec<usize>,
    pub theta_mle: ParameterVector,
    pub mc_loglik: f64,
    pub mc_std_error: f64,
    pub ebic: f64,
}

#[derive(Debug, Clone)]
pub struct PathResult {
    /// Ordered by decreasing `lambda`.
    pub records: Vec<PathRecord>,
    pub lambda_hat: f64,
    pub theta_final: ParameterVector,
    pub support_final: Vec<usize>,
    /// Grid actually used (decreasing).
    pub grid: Vec<f64>,
    /// Penalty levels that failed, with the reason.
    pub failures: Vec<(f64, String)>,
    /// Average latent draws of the selected refit.
    pub latent_mean: DMatrix<f64>,
}

impl PathResult {
    pub fn selected(&self) -> &PathRecord {
        self.records
            .iter()
            .find(|r| r.lambda == self.lambda_hat)
            .expect("selected level is recorded")
    }
}

#[derive(Clone)]
struct Refit {
    theta: ParameterVector,
    mc: crate::regpath::McEstimate,
    latent_mean: DMatrix<f64>,
}

struct PathRunner<'a> {
    model: &'a dyn ModelDefinition,
    data: &'a Dataset,
    cfg: &'a PathConfig,
    base: u64,
    start: ParameterVector,
    cache: HashMap<Vec<usize>, std::result::Result<Refit, String>>,
}

impl PathRunner<'_> {
    fn refit(&mut self, support: &[usize]) -> std::result::Result<Refit, String> {
        if let Some(hit) = self.cache.get(support) {
            return hit.clone();
        }
        let result = self.compute_refit(support).map_err(|e| e.to_string());
        self.cache.insert(support.to_vec(), result.clone());
        result
    }

    /// Deterministic in the support alone: same start, same seed.
    fn compute_refit(&self, support: &[usize]) -> Result<Refit> {
        let key: Vec<u64> = support.iter().map(|&s| s as u64).collect();
        let support_hash = derive_seed(support.len() as u64, &key);
        let (restricted, restriction) = restrict_model(self.model, self.data, support)?;
        let start = restriction.reduce_theta(&self.start);
        let seed = derive_seed(self.base, &[TAG_REFIT, support_hash]);
        let fit = fit_seeded(&restricted, &restriction.data, &self.cfg.refit, &self.cfg.sampler, &start, seed, false)?;
        let theta = restriction.expand_theta(&fit.theta_hat);
        let mc_seed = derive_seed(self.base, &[TAG_MC, support_hash]);
        let mc = mc_marginal_loglik_seeded(self.model, self.data, &theta, self.cfg.mc_draws, mc_seed)?;
        Ok(Refit {
            theta,
            mc,
            latent_mean: fit.latent_mean,
        })
    }

    fn penalized(&self, lambda: f64, theta0: &ParameterVector, tag: &[u64]) -> Result<ParameterVector> {
        let seed = derive_seed(self.base, tag);
        let cfg = self.cfg.penalized.with_lambda(lambda);
        Ok(fit_seeded(self.model, self.data, &cfg, &self.cfg.sampler, theta0, seed, true)?.theta_hat)
    }

    /// Largest absolute score `|d log g / d beta|` at the null-model MLE,
    /// estimated by averaging complete-data gradients over sampler draws.
    fn null_score(&self, theta: &ParameterVector) -> Result<f64> {
        let n = self.data.n_individuals();
        let draws = self.cfg.grid.score_draws.max(2);
        let burn = draws / 2;
        let seed = derive_seed(self.base, &[TAG_SCORE]);
        let mut sampler = Sampler::new(&self.cfg.sampler, self.model, theta, n, seed)?;
        let eval = Evaluator::new(self.model, self.data, theta);
        let mut latent = crate::model::prior_mean_state(self.model, theta, self.data);
        let layout = theta.layout();
        let mut acc = vec![0.0; layout.len()];
        for k in 1..=draws {
            sampler.step(&eval, &mut latent, k, draws)?;
            if k > burn {
                let g = eval.gradient(&latent)?;
                for idx in layout.beta_range() {
                    acc[idx] += g[idx];
                }
            }
        }
        let scale = n as f64 / (draws - burn) as f64;
        Ok(layout.beta_range().map(|idx| (acc[idx] * scale).abs()).fold(0.0, f64::max))
    }

    /// Penalized fits from the top of the grid down.
    fn descend(&self, grid: &[f64], null: &ParameterVector, failures: &mut Vec<(f64, String)>) -> Vec<(f64, ParameterVector)> {
        let mut out = Vec::new();
        let mut warm = null.clone();
        for (t, &lambda) in grid.iter().enumerate() {
            let theta0 = if self.cfg.warm_start { &warm } else { null };
            let theta_pen = match self.penalized(lambda, theta0, &[TAG_PENALIZED, t as u64]) {
                Ok(th) => th,
                Err(e) => {
                    log::warn!("penalized fit failed at lambda = {lambda:.4e}: {e}");
                    failures.push((lambda, e.to_string()));
                    continue;
                }
            };
            if self.cfg.warm_start {
                warm = theta_pen.clone();
            }
            let size = extract_support(&theta_pen.beta, self.cfg.zero_tol).len();
            out.push((lambda, theta_pen));
            if let Some(cap) = self.cfg.max_support {
                if size > cap {
                    log::info!("support size {size} exceeds {cap} at lambda = {lambda:.4e}; path stopped");
                    break;
                }
            }
        }
        out
    }

    /// Penalized fits from the bottom of the grid up, continuing past the top
    /// on the same geometric spacing until the support is empty.
    fn ascend(&self, grid: &[f64], null: &ParameterVector, failures: &mut Vec<(f64, String)>) -> Vec<(f64, ParameterVector)> {
        let mut levels: Vec<f64> = grid.iter().rev().copied().collect();
        let factor = if grid.len() > 1 { grid[0] / grid[1] } else { 2.0 };
        let mut out = Vec::new();
        let mut warm = null.clone();
        let mut extra = 0;
        let mut t = 0;
        while t < levels.len() {
            let lambda = levels[t];
            let theta0 = if self.cfg.warm_start { &warm } else { null };
            match self.penalized(lambda, theta0, &[TAG_PENALIZED, t as u64]) {
                Ok(theta_pen) => {
                    let empty = extract_support(&theta_pen.beta, self.cfg.zero_tol).is_empty();
                    if self.cfg.warm_start {
                        warm = theta_pen.clone();
                    }
                    out.push((lambda, theta_pen));
                    if t + 1 == levels.len() && !empty && extra < self.cfg.ascent_limit && factor > 1.0 {
                        levels.push(lambda * factor);
                        extra += 1;
                    }
                    if empty && t + 1 >= grid.len() {
                        break;
                    }
                }
                Err(e) => {
                    log::warn!("penalized fit failed at lambda = {lambda:.4e}: {e}");
                    failures.push((lambda, e.to_string()));
                }
            }
            t += 1;
        }
        out
    }

    fn locate_lambda_max(&self, null: &ParameterVector) -> Result<f64> {
        let score = self.null_score(null)?;
        if !(score > 0.0) {
            return Err(Error::Numerical("null-model score is zero; cannot size the grid".into()));
        }
        let budget = self.cfg.grid.pilot_fits;
        if budget == 0 {
            return Ok(score);
        }
        let zeroes = |lambda: f64, t: usize| -> Result<bool> {
            let fit = self.penalized(lambda, null, &[TAG_PILOT, t as u64])?;
            Ok(extract_support(&fit.beta, self.cfg.zero_tol).is_empty())
        };
        let mut used = 0;
        let mut lo = 0.5 * score;
        let mut hi = 1.2 * score;
        let mut found = false;
        while used < budget {
            let z = zeroes(hi, used)?;
            used += 1;
            if z {
                found = true;
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        if !found {
            log::warn!("pilot fits never produced an all-zero estimate; using lambda_max = {hi:.4e}");
            return Ok(hi);
        }
        while used < budget {
            let mid = (lo * hi).sqrt();
            if zeroes(mid, used)? {
                hi = mid;
            } else {
                lo = mid;
            }
            used += 1;
        }
        Ok(hi)
    }
}

/// Runs the full path: for each penalty level (decreasing, warm-started),
/// a penalized fit, its support, a maximum likelihood refit on that support,
/// the Monte-Carlo marginal log-likelihood and the extended BIC. The level
/// with the smallest criterion is selected (ties go to the larger penalty).
///
/// When `grid` is `None` it is built from `cfg.grid`.
pub fn run_path<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    data: &Dataset,
    grid: Option<&[f64]>,
    cfg: &PathConfig,
    theta0: Option<&ParameterVector>,
    rng: &mut R,
) -> Result<PathResult> {
    cfg.penalized.validate()?;
    cfg.refit.validate()?;
    cfg.sampler.validate()?;
    model.check_dataset(data)?;
    let base = rng.next_u64();
    let mut start = match theta0 {
        Some(t) => t.clone(),
        None => default_theta0(model, data)?,
    };
    start.beta.fill(0.0);
    let mut runner = PathRunner {
        model,
        data,
        cfg,
        base,
        start,
        cache: HashMap::new(),
    };

    let null = runner.refit(&[]).map_err(Error::PathFailed)?.theta;
    let mut grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::Config("empty lambda grid".into())),
        None => {
            let lambda_max = match cfg.grid.lambda_max {
                Some(l) => l,
                None => runner.locate_lambda_max(&null)?,
            };
            lambda_grid(lambda_max, cfg.grid.ratio, cfg.grid.n_points)?
        }
    };
    if grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::Config("penalty levels must be finite and non-negative".into()));
    }
    grid.sort_by(|a, b| b.total_cmp(a));

    let n_obs = data.n_observed();
    let n_penalized = model.layout(data.n_covariates()).beta_range().len();
    let mut failures = Vec::new();
    let levels = match cfg.sweep {
        Sweep::Descending => runner.descend(&grid, &null, &mut failures),
        Sweep::Ascending => runner.ascend(&grid, &null, &mut failures),
    };
    let mut grid: Vec<f64> = levels.iter().map(|(l, _)| *l).collect();
    grid.sort_by(|a, b| b.total_cmp(a));

    let mut records = Vec::new();
    for (lambda, theta_pen) in levels {
        let support = extract_support(&theta_pen.beta, cfg.zero_tol);
        if cfg.max_support.is_some_and(|cap| support.len() > cap) {
            continue;
        }
        let refit = match runner.refit(&support) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("refit failed at lambda = {lambda:.4e}: {e}");
                failures.push((lambda, e));
                continue;
            }
        };
        let criterion = ebic(refit.mc.loglik, support.len(), n_obs, n_penalized);
        records.push(PathRecord {
            lambda,
            theta_pen,
            support,
            theta_mle: refit.theta,
            mc_loglik: refit.mc.loglik,
            mc_std_error: refit.mc.std_error,
            ebic: criterion,
        });
    }
    records.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));

    let best = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.ebic.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, e)) if r.ebic >= e => acc,
            _ => Some((i, r.ebic)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| {
            let reasons: Vec<String> = failures.iter().map(|(l, e)| format!("lambda {l:.4e}: {e}")).collect();
            Error::PathFailed(if reasons.is_empty() {
                "no penalty level produced a finite criterion".into()
            } else {
                reasons.join("; ")
            })
        })?;
    let chosen = &records[best];
    let latent_mean = runner
        .refit(&chosen.support)
        .map(|r| r.latent_mean)
        .unwrap_or_else(|_| DMatrix::zeros(data.n_individuals(), model.latent_dim()));
    Ok(PathResult {
        lambda_hat: chosen.lambda,
        theta_final: chosen.theta_mle.clone(),
        support_final: chosen.support.clone(),
        records,
        grid,
        failures,
        latent_mean,
    })
}
