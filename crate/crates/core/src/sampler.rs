//! Draws of the individual parameters from `p(phi | Y; theta)`: a random-walk
//! Metropolis–Hastings kernel for general models and exact Gaussian draws
//! when the mean function is affine in `phi`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Evaluator, LatentState, ModelDefinition, ParameterVector};
use crate::rng::individual_streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Direct draws for models affine in `phi`, Metropolis–Hastings otherwise.
    #[default]
    Auto,
    Metropolis,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Initial per-component proposal standard deviation; defaults to
    /// `sqrt(gamma_sq)` at the starting parameter.
    pub proposal_sd: Option<Vec<f64>>,
    pub adapt: bool,
    pub adapt_target: f64,
    /// Iterations between proposal-scale updates.
    pub adapt_window: usize,
    pub adapt_rate: f64,
    /// Kernel applications per optimizer iteration.
    pub steps_per_iteration: usize,
    /// Adaptation stops for this final fraction of the iterations.
    pub freeze_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Auto,
            proposal_sd: None,
            adapt: true,
            adapt_target: 0.4,
            adapt_window: 20,
            adapt_rate: 0.5,
            steps_per_iteration: 1,
            freeze_fraction: 0.25,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::Config("adapt_target must lie in (0, 1)".into()));
        }
        if self.adapt_window == 0 || self.steps_per_iteration == 0 {
            return Err(Error::Config("adapt_window and steps_per_iteration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config("freeze_fraction must lie in [0, 1]".into()));
        }
        if let Some(sd) = &self.proposal_sd {
            if sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config("proposal_sd must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One random-walk Metropolis–Hastings transition for every individual.
///
/// `proposal_sd` holds one row of per-component scales per individual and
/// `streams` one generator per individual. The input state is left untouched.
pub fn mh_step(
    eval: &Evaluator,
    latent: &LatentState,
    proposal_sd: &DMatrix<f64>,
    streams: &mut [ChaCha8Rng],
) -> Result<LatentState> {
    let mut next = latent.clone();
    mh_step_in_place(eval, &mut next, proposal_sd, streams)?;
    Ok(next)
}

fn mh_step_in_place(
    eval: &Evaluator,
    latent: &mut LatentState,
    proposal_sd: &DMatrix<f64>,
    streams: &mut [ChaCha8Rng],
) -> Result<()> {
    let n = latent.phi.nrows();
    let q = latent.phi.ncols();
    let mut current = vec![0.0; q];
    let mut proposal = vec![0.0; q];
    for (i, rng) in streams.iter_mut().enumerate().take(n) {
        for k in 0..q {
            current[k] = latent.phi[(i, k)];
            let z: f64 = rng.sample(StandardNormal);
            proposal[k] = current[k] + proposal_sd[(i, k)] * z;
        }
        let u: f64 = rng.random();
        let lp_cur = eval.individual_log_posterior(i, &current)?;
        // A proposal outside the model's domain has zero target density.
        let lp_new = match eval.individual_log_posterior(i, &proposal) {
            Ok(v) => v,
            Err(Error::Domain { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        latent.proposed[i] += 1;
        if u.ln() < lp_new - lp_cur {
            latent.accepted[i] += 1;
            for k in 0..q {
                latent.phi[(i, k)] = proposal[k];
            }
        }
    }
    Ok(())
}

/// Mean and covariance of the Gaussian posterior of `phi_i` for a model
/// affine in `phi`.
pub fn posterior_moments(eval: &Evaluator, i: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, chol) = posterior_factor(eval, i)?;
    Ok((mean, chol.inverse()))
}

fn posterior_factor(eval: &Evaluator, i: usize) -> Result<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let model = eval.model;
    let q = model.latent_dim();
    let ind = eval.data.individual(i);
    let gamma_sq = eval.gamma_sq();
    let sigma_sq = eval.sigma_sq();
    let prior = eval.prior_mean(i);
    let mut precision = DMatrix::from_fn(q, q, |r, c| if r == c { 1.0 / gamma_sq[r] } else { 0.0 });
    let mut b = DVector::from_fn(q, |k, _| prior[k] / gamma_sq[k]);
    let mut w = vec![0.0; q];
    for j in ind.observed_indices() {
        let c = model
            .linear_loading(&eval.theta.alpha, ind.times[j], &ind.constants, &mut w)
            .ok_or_else(|| Error::InvalidInput(format!("model `{}` is not linear in phi", model.name())))?;
        let y_adj = ind.y[j] - c - eval.obs_offset(i, j);
        for r in 0..q {
            b[r] += w[r] * y_adj / sigma_sq;
            for s in 0..q {
                precision[(r, s)] += w[r] * w[s] / sigma_sq;
            }
        }
    }
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("posterior precision of individual {i} is not positive definite")))?;
    let mean = chol.solve(&b);
    Ok((mean, chol))
}

/// Exact draw from the Gaussian posterior of `phi_i`.
pub fn direct_gaussian_sample<R: Rng + ?Sized>(eval: &Evaluator, i: usize, rng: &mut R) -> Result<Vec<f64>> {
    let (mean, chol) = posterior_factor(eval, i)?;
    let q = mean.len();
    let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
    // precision = L L^T, so L^{-T} z has the posterior covariance.
    let l = chol.l();
    let dev = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular posterior factor".into()))?;
    Ok((mean + dev).iter().copied().collect())
}

/// Multiplies each individual's proposal scales by
/// `exp(rate * (acceptance - target))` and resets the counters.
pub fn adapt_scale(latent: &mut LatentState, proposal_sd: &mut DMatrix<f64>, cfg: &SamplerConfig) {
    for (i, rate) in latent.acceptance_rates().into_iter().enumerate() {
        if latent.proposed[i] == 0 {
            continue;
        }
        let factor = (cfg.adapt_rate * (rate - cfg.adapt_target)).exp();
        for k in 0..proposal_sd.ncols() {
            proposal_sd[(i, k)] *= factor;
        }
    }
    latent.reset_counters();
}

/// Sampler state carried across optimizer iterations.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    direct: bool,
    scales: DMatrix<f64>,
    streams: Vec<ChaCha8Rng>,
    since_adapt: usize,
    /// Acceptance counters accumulated over the whole run.
    total_accepted: Vec<u64>,
    total_proposed: Vec<u64>,
}

impl Sampler {
    pub fn new(
        cfg: &SamplerConfig,
        model: &dyn ModelDefinition,
        theta0: &ParameterVector,
        n_individuals: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let q = model.latent_dim();
        let direct = match cfg.kind {
            SamplerKind::Auto => model.is_linear_in_latent(),
            SamplerKind::Metropolis => false,
            SamplerKind::Direct => {
                if !model.is_linear_in_latent() {
                    return Err(Error::Config(format!(
                        "direct sampling requested but model `{}` is not linear in phi",
                        model.name()
                    )));
                }
                true
            }
        };
        let initial: Vec<f64> = match &cfg.proposal_sd {
            Some(sd) if sd.len() == q => sd.clone(),
            Some(_) => return Err(Error::Config(format!("proposal_sd must have {q} entries"))),
            None => theta0.gamma_sq_vec().iter().map(|g| g.sqrt()).collect(),
        };
        Ok(Sampler {
            cfg: cfg.clone(),
            direct,
            scales: DMatrix::from_fn(n_individuals, q, |_, k| initial[k]),
            streams: individual_streams(seed, n_individuals),
            since_adapt: 0,
            total_accepted: vec![0; n_individuals],
            total_proposed: vec![0; n_individuals],
        })
    }

    pub fn is_direct(&self) -> bool {
        self.direct
    }

    pub fn scales(&self) -> &DMatrix<f64> {
        &self.scales
    }

    /// Simulation step of iteration `iteration` (1-based) out of `k_max`.
    pub fn step(&mut self, eval: &Evaluator, latent: &mut LatentState, iteration: usize, k_max: usize) -> Result<()> {
        if self.direct {
            for i in 0..latent.phi.nrows() {
                let draw = direct_gaussian_sample(eval, i, &mut self.streams[i])?;
                for (k, v) in draw.into_iter().enumerate() {
                    latent.phi[(i, k)] = v;
                }
            }
            return Ok(());
        }
        for _ in 0..self.cfg.steps_per_iteration {
            mh_step_in_place(eval, latent, &self.scales, &mut self.streams)?;
        }
        self.since_adapt += 1;
        let frozen_from = ((1.0 - self.cfg.freeze_fraction) * k_max as f64).floor() as usize;
        if self.since_adapt >= self.cfg.adapt_window {
            for i in 0..latent.accepted.len() {
                self.total_accepted[i] += latent.accepted[i];
                self.total_proposed[i] += latent.proposed[i];
            }
            if self.cfg.adapt && iteration <= frozen_from {
                adapt_scale(latent, &mut self.scales, &self.cfg);
            } else {
                latent.reset_counters();
            }
            self.since_adapt = 0;
        }
        Ok(())
    }

    /// Per-individual acceptance rates over the run (all ones for direct draws).
    pub fn acceptance_rates(&self, latent: &LatentState) -> Vec<f64> {
        if self.direct {
            return vec![1.0; latent.phi.nrows()];
        }
        (0..latent.phi.nrows())
            .map(|i| {
                let a = self.total_accepted[i] + latent.accepted[i];
                let p = self.total_proposed[i] + latent.proposed[i];
                if p == 0 {
                    0.0
                } else {
                    a as f64 / p as f64
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rate: (u64, u64)) -> LatentState {
        let mut s = LatentState::new(DMatrix::zeros(1, 2));
        s.accepted[0] = rate.0;
        s.proposed[0] = rate.1;
        s
    }

    #[test]
    fn adaptation_at_target_is_neutral() {
        let cfg = SamplerConfig::default();
        let mut sd = DMatrix::from_element(1, 2, 0.7);
        let mut s = state((4, 10));
        adapt_scale(&mut s, &mut sd, &cfg);
        assert!((sd[(0, 0)] - 0.7).abs() < 1e-15);
        assert_eq!(s.proposed[0], 0);
    }

    #[test]
    fn adaptation_direction() {
        let cfg = SamplerConfig::default();
        let mut sd = DMatrix::from_element(1, 2, 1.0);
        adapt_scale(&mut state((10, 10)), &mut sd, &cfg);
        assert!(sd[(0, 0)] > 1.0);
        let mut sd = DMatrix::from_element(1, 2, 1.0);
        adapt_scale(&mut state((0, 10)), &mut sd, &cfg);
        assert!(sd[(0, 1)] < 1.0);
        assert!((sd[(0, 1)] - (-0.2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_target() {
        let cfg = SamplerConfig {
            adapt_target: 1.0,
            ..SamplerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
