//! Two-step comparison method: per-individual nonlinear least squares, then
//! a cross-validated LASSO of each estimated latent component on the
//! covariates.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BetaTarget, Dataset, Individual, ModelDefinition, ParameterVector};
use crate::regpath::lambda_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Levenberg-Marquardt starts per individual; the first is the prior mean.
    pub n_starts: usize,
    /// Spread of the extra starts, in prior standard deviations.
    pub start_spread: f64,
    pub max_iter: usize,
    pub folds: usize,
    pub grid_n: usize,
    pub grid_ratio: f64,
    pub cd_tol: f64,
    pub cd_max_sweeps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            n_starts: 5,
            start_spread: 1.0,
            max_iter: 200,
            folds: 5,
            grid_n: 50,
            grid_ratio: 1e-3,
            cd_tol: 1e-8,
            cd_max_sweeps: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    /// `N x q` individual estimates; rows of dropped individuals are NaN.
    pub latent: DMatrix<f64>,
    pub dropped: Vec<usize>,
    /// LASSO coefficients on the original covariate scale, one row per target.
    pub beta: DMatrix<f64>,
    /// Row-major flat indices of the nonzero coefficients.
    pub support: Vec<usize>,
    /// Penalty chosen by the one-standard-error rule, per row.
    pub lambdas: Vec<f64>,
}

/// Runs both steps. `start` supplies the prior mean, variances and `alpha`
/// used to seed the individual fits.
pub fn two_step<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    data: &Dataset,
    start: &ParameterVector,
    cfg: &BaselineConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    let targets = model.beta_targets();
    if targets.iter().any(|t| matches!(t, BetaTarget::Observation)) {
        return Err(Error::Config(format!(
            "the two-step method needs individual-level covariates, `{}` has observation-level ones",
            model.name()
        )));
    }
    let (n, p, q) = (data.n_individuals(), data.n_covariates(), model.latent_dim());
    let mut latent = DMatrix::from_element(n, q, f64::NAN);
    let mut dropped = Vec::new();
    for (i, ind) in data.individuals().iter().enumerate() {
        match fit_individual(model, ind, start, cfg, rng) {
            Some(phi) => latent.row_mut(i).copy_from_slice(&phi),
            None => dropped.push(i),
        }
    }
    if !dropped.is_empty() {
        warn!("{} individuals failed the nonlinear fit and were dropped", dropped.len());
    }
    let kept: Vec<usize> = (0..n).filter(|i| !dropped.contains(i)).collect();
    if kept.len() < cfg.folds.max(3) {
        return Err(Error::Numerical("too few individuals survived the nonlinear fits".into()));
    }
    let x = data.covariates().select_rows(&kept);
    let mut beta = DMatrix::zeros(targets.len(), p);
    let mut lambdas = Vec::with_capacity(targets.len());
    for (r, target) in targets.iter().enumerate() {
        let BetaTarget::Latent(k) = *target else { unreachable!() };
        let y = DVector::from_iterator(kept.len(), kept.iter().map(|&i| latent[(i, k)]));
        let (coef, lambda) = lasso_cv_1se(&x, &y, cfg, rng)?;
        beta.row_mut(r).copy_from(&coef.transpose());
        lambdas.push(lambda);
    }
    let support = (0..targets.len() * p)
        .filter(|&f| beta[(f / p, f % p)] != 0.0)
        .collect();
    Ok(BaselineResult {
        latent,
        dropped,
        beta,
        support,
        lambdas,
    })
}

/// Least-squares fit of one individual's curve over `(phi, alpha)`, keeping
/// the best of several Levenberg-Marquardt runs. Returns `phi` only.
fn fit_individual<R: Rng + ?Sized>(
    model: &dyn ModelDefinition,
    ind: &Individual,
    start: &ParameterVector,
    cfg: &BaselineConfig,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let q = model.latent_dim();
    let base: Vec<f64> = start.mu.iter().chain(&start.alpha).copied().collect();
    let mut spread: Vec<f64> = start.gamma_sq_vec().iter().map(|g| g.sqrt()).collect();
    spread.extend(start.alpha.iter().map(|a| 0.1 * a.abs()));
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in 0..cfg.n_starts.max(1) {
        let z0: Vec<f64> = if s == 0 {
            base.clone()
        } else {
            base.iter()
                .zip(&spread)
                .map(|(b, sd)| b + cfg.start_spread * sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        if let Some((z, sse)) = levenberg_marquardt(model, ind, q, z0, cfg.max_iter) {
            if best.as_ref().is_none_or(|(_, b)| sse < *b) {
                best = Some((z, sse));
            }
        }
    }
    best.map(|(z, _)| z[..q].to_vec())
}

fn residuals(model: &dyn ModelDefinition, ind: &Individual, q: usize, z: &[f64], jac: Option<&mut DMatrix<f64>>) -> Option<(DVector<f64>, f64)> {
    let (phi, alpha) = z.split_at(q);
    let obs: Vec<usize> = ind.observed_indices().collect();
    let mut r = DVector::zeros(obs.len());
    let mut d_alpha = vec![0.0; alpha.len()];
    let mut d_phi = vec![0.0; q];
    let mut jac = jac;
    for (row, &j) in obs.iter().enumerate() {
        let m = model.mean_grad(alpha, ind.times[j], phi, &ind.constants, &mut d_alpha, &mut d_phi);
        if !m.is_finite() {
            return None;
        }
        r[row] = ind.y[j] - m;
        if let Some(jm) = jac.as_deref_mut() {
            for k in 0..q {
                jm[(row, k)] = d_phi[k];
            }
            for a in 0..alpha.len() {
                jm[(row, q + a)] = d_alpha[a];
            }
        }
    }
    let sse = r.norm_squared();
    sse.is_finite().then_some((r, sse))
}

fn levenberg_marquardt(model: &dyn ModelDefinition, ind: &Individual, q: usize, mut z: Vec<f64>, max_iter: usize) -> Option<(Vec<f64>, f64)> {
    let d = z.len();
    let m = ind.n_observed();
    if m < d {
        return None;
    }
    let mut jac = DMatrix::zeros(m, d);
    let (mut r, mut sse) = residuals(model, ind, q, &z, Some(&mut jac))?;
    let mut damping = 1e-3;
    for _ in 0..max_iter {
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut improved = false;
        while damping < 1e16 {
            let mut a = jtj.clone();
            for k in 0..d {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&g);
            let trial: Vec<f64> = z.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let mut trial_jac = DMatrix::zeros(m, d);
            match residuals(model, ind, q, &trial, Some(&mut trial_jac)) {
                Some((tr, tsse)) if tsse < sse => {
                    let small_step = delta.norm() <= 1e-12 * (1.0 + z.iter().map(|v| v * v).sum::<f64>().sqrt());
                    let small_gain = sse - tsse <= 1e-14 * sse;
                    z = trial;
                    r = tr;
                    sse = tsse;
                    jac = trial_jac;
                    damping = (damping / 10.0).max(1e-12);
                    improved = true;
                    if small_step || small_gain {
                        return Some((z, sse));
                    }
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Some((z, sse))
}

/// Coordinate descent for `0.5 ||y - X b||^2 + lambda ||b||_1`, warm-started
/// from `b`. Columns with zero norm keep a zero coefficient.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, b: &mut DVector<f64>, tol: f64, max_sweeps: usize) {
    let p = x.ncols();
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let mut r = y - x * &*b;
    for _ in 0..max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let old = b[j];
            let rho = col.dot(&r) + norms[j] * old;
            let new = soft(rho, lambda) / norms[j];
            if new != old {
                r.axpy(old - new, &col, 1.0);
                b[j] = new;
                max_change = max_change.max((new - old).abs() * norms[j].sqrt());
            }
        }
        if max_change <= tol * (1.0 + y.norm()) {
            break;
        }
    }
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

struct Standardized {
    x: DMatrix<f64>,
    y: DVector<f64>,
    x_mean: DVector<f64>,
    x_sd: DVector<f64>,
    y_mean: f64,
}

fn standardize(x: &DMatrix<f64>, y: &DVector<f64>) -> Standardized {
    let n = x.nrows() as f64;
    let x_mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xs = x.clone();
    let mut x_sd = DVector::zeros(x.ncols());
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
        let sd = (col.norm_squared() / n).sqrt();
        x_sd[j] = sd;
        if sd > 0.0 {
            col /= sd;
        }
    }
    let y_mean = y.sum() / n;
    Standardized {
        x: xs,
        y: y.add_scalar(-y_mean),
        x_mean,
        x_sd,
        y_mean,
    }
}

fn path_fit(s: &Standardized, grid: &[f64], scale: f64, cfg: &BaselineConfig) -> Vec<DVector<f64>> {
    let mut b = DVector::zeros(s.x.ncols());
    grid.iter()
        .map(|&l| {
            lasso_cd(&s.x, &s.y, l * scale, &mut b, cfg.cd_tol, cfg.cd_max_sweeps);
            b.clone()
        })
        .collect()
}

/// LASSO with `folds`-fold cross-validation and the one-standard-error rule.
/// Columns are standardized internally; the returned coefficients are on the
/// original scale, with the chosen penalty on the standardized scale.
pub fn lasso_cv_1se<R: Rng + ?Sized>(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &BaselineConfig, rng: &mut R) -> Result<(DVector<f64>, f64)> {
    let n = x.nrows();
    let k = cfg.folds.max(2).min(n);
    let full = standardize(x, y);
    let lambda_max = (full.x.transpose() * &full.y).amax();
    if lambda_max <= 0.0 {
        return Ok((DVector::zeros(x.ncols()), 0.0));
    }
    let grid = lambda_grid(lambda_max, cfg.grid_ratio, cfg.grid_n)?;
    let path = path_fit(&full, &grid, 1.0, cfg);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold_err = vec![vec![0.0; k]; grid.len()];
    for f in 0..k {
        let test: Vec<usize> = order.iter().enumerate().filter(|(pos, _)| pos % k == f).map(|(_, &i)| i).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(pos, _)| pos % k != f).map(|(_, &i)| i).collect();
        let tr = standardize(&x.select_rows(&train), &y.select_rows(&train));
        // Keep the per-observation penalty comparable across sample sizes.
        let scale = train.len() as f64 / n as f64;
        let fold_path = path_fit(&tr, &grid, scale, cfg);
        for (l, b) in fold_path.iter().enumerate() {
            let mut err = 0.0;
            for &i in &test {
                let mut pred = tr.y_mean;
                for j in 0..x.ncols() {
                    if b[j] != 0.0 && tr.x_sd[j] > 0.0 {
                        pred += b[j] * (x[(i, j)] - tr.x_mean[j]) / tr.x_sd[j];
                    }
                }
                err += (y[i] - pred).powi(2);
            }
            fold_err[l][f] = err / test.len() as f64;
        }
    }
    let cvm: Vec<f64> = fold_err.iter().map(|e| e.iter().sum::<f64>() / k as f64).collect();
    let cvsd: Vec<f64> = fold_err
        .iter()
        .zip(&cvm)
        .map(|(e, m)| (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64 / k as f64).sqrt())
        .collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| cvm[a].total_cmp(&cvm[b]))
        .expect("nonempty grid");
    let bound = cvm[best] + cvsd[best];
    let chosen = (0..grid.len()).find(|&l| cvm[l] <= bound).unwrap_or(best);
    let coef = DVector::from_iterator(
        x.ncols(),
        (0..x.ncols()).map(|j| if full.x_sd[j] > 0.0 { path[chosen][j] / full.x_sd[j] } else { 0.0 }),
    );
    Ok((coef, grid[chosen]))
}
