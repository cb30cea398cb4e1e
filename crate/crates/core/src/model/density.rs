//! Complete-data log density, its gradient in the flat layout, and the
//! per-individual unnormalized latent posterior.

use std::f64::consts::PI;

use nalgebra::DVector;

use super::data::{CovariateLevel, Dataset};
use super::models::{BetaTarget, ModelDefinition};
use super::params::{LatentState, ParameterVector};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Precomputed quantities for evaluating densities at a fixed `theta`:
/// prior means `mu + X_i beta` and observation-level offsets `X_ij beta`.
pub struct Evaluator<'a> {
    pub model: &'a dyn ModelDefinition,
    pub data: &'a Dataset,
    pub theta: &'a ParameterVector,
    prior_mean: Vec<f64>,
    obs_offset: Vec<f64>,
    gamma_sq: Vec<f64>,
    sigma_sq: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a dyn ModelDefinition, data: &'a Dataset, theta: &'a ParameterVector) -> Self {
        let n = data.n_individuals();
        let q = model.latent_dim();
        let mut prior_mean = vec![0.0; n * q];
        for i in 0..n {
            prior_mean[i * q..(i + 1) * q].copy_from_slice(&theta.mu);
        }
        let mut obs_offset = Vec::new();
        if data.level() == CovariateLevel::Observation {
            obs_offset = vec![0.0; data.total_rows()];
        }
        let x = data.covariates();
        for (r, target) in model.beta_targets().iter().enumerate() {
            let row = theta.beta.row(r);
            if row.iter().all(|&b| b == 0.0) {
                continue;
            }
            let shift = x * row.transpose();
            match *target {
                BetaTarget::Latent(k) => {
                    for i in 0..n {
                        prior_mean[i * q + k] += shift[i];
                    }
                }
                BetaTarget::Observation => {
                    for (o, s) in obs_offset.iter_mut().zip(shift.iter()) {
                        *o += s;
                    }
                }
            }
        }
        Evaluator {
            model,
            data,
            theta,
            prior_mean,
            obs_offset,
            gamma_sq: theta.gamma_sq_vec(),
            sigma_sq: theta.sigma_sq(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    /// `mu + X_i beta`.
    pub fn prior_mean(&self, i: usize) -> &[f64] {
        let q = self.latent_dim();
        &self.prior_mean[i * q..(i + 1) * q]
    }

    pub fn gamma_sq(&self) -> &[f64] {
        &self.gamma_sq
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Additive observation-level covariate term for `(i, j)`.
    pub fn obs_offset(&self, i: usize, j: usize) -> f64 {
        if self.obs_offset.is_empty() {
            0.0
        } else {
            self.obs_offset[self.data.row_offset(i) + j]
        }
    }

    /// Full observation mean `m(alpha, V_ij, phi) + X_ij beta`.
    pub fn observation_mean(&self, i: usize, j: usize, phi: &[f64]) -> Result<f64> {
        let ind = self.data.individual(i);
        let m = self.model.mean(&self.theta.alpha, ind.times[j], phi, &ind.constants) + self.obs_offset(i, j);
        if m.is_finite() {
            Ok(m)
        } else {
            Err(Error::Domain {
                individual: i,
                observation: j,
            })
        }
    }

    /// `sum_j log p(Y_ij | phi)` over observed `j`.
    pub fn obs_loglik(&self, i: usize, phi: &[f64]) -> Result<f64> {
        let ind = self.data.individual(i);
        let mut sse = 0.0;
        let mut count = 0usize;
        for j in ind.observed_indices() {
            let r = ind.y[j] - self.observation_mean(i, j, phi)?;
            sse += r * r;
            count += 1;
        }
        Ok(-0.5 * count as f64 * (LN_2PI + self.sigma_sq.ln()) - 0.5 * sse / self.sigma_sq)
    }

    /// `log p(phi_i)` under `N(mu + X_i beta, diag(gamma_sq))`.
    pub fn prior_logpdf(&self, i: usize, phi: &[f64]) -> f64 {
        let mean = self.prior_mean(i);
        phi.iter()
            .zip(mean)
            .zip(&self.gamma_sq)
            .map(|((p, m), g)| -0.5 * (2.0 * PI * g).ln() - (p - m).powi(2) / (2.0 * g))
            .sum()
    }

    pub fn individual_log_posterior(&self, i: usize, phi: &[f64]) -> Result<f64> {
        Ok(self.obs_loglik(i, phi)? + self.prior_logpdf(i, phi))
    }

    pub fn complete_log_density(&self, latent: &LatentState) -> Result<f64> {
        let q = self.latent_dim();
        let mut phi = vec![0.0; q];
        let mut total = 0.0;
        for i in 0..self.data.n_individuals() {
            for k in 0..q {
                phi[k] = latent.phi[(i, k)];
            }
            total += self.individual_log_posterior(i, &phi)?;
        }
        Ok(total)
    }

    /// Gradient of `(1/N) log f(theta; Y, phi)` in the flat layout, with the
    /// variance coordinates differentiated on the log scale.
    pub fn gradient(&self, latent: &LatentState) -> Result<Vec<f64>> {
        let model = self.model;
        let data = self.data;
        let theta = self.theta;
        let layout = theta.layout();
        let n = data.n_individuals();
        let q = self.latent_dim();
        let a = model.fixed_dim();
        let mut grad = vec![0.0; layout.len()];

        // Standardized latent deviations (phi - prior mean) / gamma^2.
        let mut latent_dev: Vec<DVector<f64>> = (0..q).map(|_| DVector::zeros(n)).collect();
        let mut g_log_gamma = vec![0.0; q];
        for i in 0..n {
            let mean = self.prior_mean(i);
            for k in 0..q {
                let d = latent.phi[(i, k)] - mean[k];
                latent_dev[k][i] = d / self.gamma_sq[k];
                g_log_gamma[k] += -0.5 + d * d / (2.0 * self.gamma_sq[k]);
            }
        }

        let need_obs_resid = model.beta_targets().contains(&BetaTarget::Observation);
        let mut obs_resid = if need_obs_resid {
            DVector::zeros(data.total_rows())
        } else {
            DVector::zeros(0)
        };
        let mut g_alpha = vec![0.0; a];
        let mut d_alpha = vec![0.0; a];
        let mut d_phi = vec![0.0; q];
        let mut phi = vec![0.0; q];
        let mut g_log_sigma = 0.0;
        for i in 0..n {
            let ind = data.individual(i);
            for k in 0..q {
                phi[k] = latent.phi[(i, k)];
            }
            for j in ind.observed_indices() {
                let m = if a > 0 {
                    model.mean_grad(&theta.alpha, ind.times[j], &phi, &ind.constants, &mut d_alpha, &mut d_phi)
                } else {
                    model.mean(&theta.alpha, ind.times[j], &phi, &ind.constants)
                } + self.obs_offset(i, j);
                if !m.is_finite() {
                    return Err(Error::Domain {
                        individual: i,
                        observation: j,
                    });
                }
                let r = ind.y[j] - m;
                let scaled = r / self.sigma_sq;
                for (g, d) in g_alpha.iter_mut().zip(&d_alpha) {
                    *g += scaled * d;
                }
                g_log_sigma += -0.5 + r * r / (2.0 * self.sigma_sq);
                if need_obs_resid {
                    obs_resid[data.row_offset(i) + j] = scaled;
                }
            }
        }

        let inv_n = 1.0 / n as f64;
        for (dst, g) in grad[layout.alpha_range()].iter_mut().zip(&g_alpha) {
            *dst = g * inv_n;
        }
        for k in 0..q {
            grad[layout.mu_range().start + k] = latent_dev[k].sum() * inv_n;
            grad[layout.log_gamma_range().start + k] = g_log_gamma[k] * inv_n;
        }
        grad[layout.log_sigma_index()] = g_log_sigma * inv_n;

        let x = data.covariates();
        let p = layout.n_covariates;
        for (r, target) in model.beta_targets().iter().enumerate() {
            let g = match *target {
                BetaTarget::Latent(k) => x.tr_mul(&latent_dev[k]),
                BetaTarget::Observation => x.tr_mul(&obs_resid),
            };
            let start = layout.beta_index(r, 0);
            for c in 0..p {
                grad[start + c] = g[c] * inv_n;
            }
        }
        Ok(grad)
    }
}

/// `log f(theta; Y, phi) = sum_i [sum_j log p(Y_ij | phi_i) + log p(phi_i)]`.
pub fn complete_log_density(
    model: &dyn ModelDefinition,
    theta: &ParameterVector,
    data: &Dataset,
    latent: &LatentState,
) -> Result<f64> {
    Evaluator::new(model, data, theta).complete_log_density(latent)
}

/// Gradient of `(1/N) log f` in the flat layout.
pub fn complete_log_density_grad(
    model: &dyn ModelDefinition,
    theta: &ParameterVector,
    data: &Dataset,
    latent: &LatentState,
) -> Result<Vec<f64>> {
    Evaluator::new(model, data, theta).gradient(latent)
}

/// Unnormalized log posterior of `phi_i` given `Y_i`.
pub fn latent_log_posterior_unnorm(
    model: &dyn ModelDefinition,
    theta: &ParameterVector,
    data: &Dataset,
    i: usize,
    phi_i: &[f64],
) -> Result<f64> {
    Evaluator::new(model, data, theta).individual_log_posterior(i, phi_i)
}

/// Latent state at the prior means `mu + X_i beta`.
pub fn prior_mean_state(model: &dyn ModelDefinition, theta: &ParameterVector, data: &Dataset) -> LatentState {
    let eval = Evaluator::new(model, data, theta);
    let n = data.n_individuals();
    let q = model.latent_dim();
    let phi = nalgebra::DMatrix::from_fn(n, q, |i, k| eval.prior_mean(i)[k]);
    LatentState::new(phi)
}
