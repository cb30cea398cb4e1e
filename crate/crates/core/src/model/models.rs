//! The pluggable structural-model interface and the concrete models.

use serde::{Deserialize, Serialize};

use super::data::{CovariateLevel, Dataset};
use super::params::Layout;
use crate::error::{Error, Result};

/// Which quantity a row of `beta` regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaTarget {
    /// Shifts the prior mean of latent component `k`.
    Latent(usize),
    /// Adds `X_ij beta_row` to the observation mean (observation-level covariates).
    Observation,
}

/// Parameter blocks held fixed at their starting value during fitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Frozen {
    pub alpha: bool,
    pub mu: bool,
    pub variances: bool,
}

/// Rough starting values for the non-regression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma_sq: Vec<f64>,
    pub sigma_sq: f64,
}

/// Structural model `Y_ij = m(alpha, V_ij, phi_i) + eps_ij` with
/// `phi_i ~ N(mu + X_i beta, diag(gamma_sq))`.
pub trait ModelDefinition: Send + Sync {
    fn name(&self) -> &str;

    /// `q`, dimension of `phi_i`.
    fn latent_dim(&self) -> usize;

    /// `a`, dimension of the population-level fixed effects `alpha`.
    fn fixed_dim(&self) -> usize;

    fn covariate_level(&self) -> CovariateLevel {
        CovariateLevel::Individual
    }

    /// One entry per row of `beta`.
    fn beta_targets(&self) -> &[BetaTarget];

    fn constant_names(&self) -> &[&'static str] {
        &[]
    }

    /// Mean function `m`. Returns a non-finite value outside the admissible domain.
    fn mean(&self, alpha: &[f64], v: f64, phi: &[f64], consts: &[f64]) -> f64;

    /// Mean function together with its partial derivatives.
    fn mean_grad(
        &self,
        alpha: &[f64],
        v: f64,
        phi: &[f64],
        consts: &[f64],
        d_alpha: &mut [f64],
        d_phi: &mut [f64],
    ) -> f64;

    /// When `m` is affine in `phi` at this point, writes the loading `w` and
    /// returns the intercept `c` so that `m = c + w . phi`.
    fn linear_loading(&self, _alpha: &[f64], _v: f64, _consts: &[f64], _w: &mut [f64]) -> Option<f64> {
        None
    }

    fn frozen(&self) -> Frozen {
        Frozen::default()
    }

    /// Row-major `beta_rows x p` mask of the coefficients allowed to move;
    /// `None` means all of them.
    fn beta_mask(&self) -> Option<&[bool]> {
        None
    }

    fn initial_guess(&self, _data: &Dataset) -> Option<InitialGuess> {
        None
    }

    fn is_linear_in_latent(&self) -> bool {
        let mut w = vec![0.0; self.latent_dim()];
        let alpha = vec![1.0; self.fixed_dim()];
        let consts = vec![1.0; self.constant_names().len()];
        self.linear_loading(&alpha, 0.0, &consts, &mut w).is_some()
    }

    fn layout(&self, n_covariates: usize) -> Layout {
        Layout {
            fixed_dim: self.fixed_dim(),
            latent_dim: self.latent_dim(),
            beta_rows: self.beta_targets().len(),
            n_covariates,
        }
    }

    /// Flat coordinates the optimizer may update.
    fn free_mask(&self, n_covariates: usize) -> Vec<bool> {
        let layout = self.layout(n_covariates);
        let frozen = self.frozen();
        let mut mask = vec![true; layout.len()];
        for i in layout.alpha_range() {
            mask[i] = !frozen.alpha;
        }
        for i in layout.mu_range() {
            mask[i] = !frozen.mu;
        }
        for i in layout.log_gamma_range() {
            mask[i] = !frozen.variances;
        }
        mask[layout.log_sigma_index()] = !frozen.variances;
        if let Some(bm) = self.beta_mask() {
            for (o, &m) in bm.iter().enumerate() {
                mask[layout.beta_range().start + o] = m;
            }
        }
        mask
    }

    /// Checks that the dataset matches this model's covariate level and constants.
    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.level() != self.covariate_level() {
            return Err(Error::InvalidInput(format!(
                "model `{}` expects {:?}-level covariates",
                self.name(),
                self.covariate_level()
            )));
        }
        let names = self.constant_names();
        if data.constant_names().len() != names.len()
            || data.constant_names().iter().zip(names).any(|(a, b)| a != b)
        {
            return Err(Error::InvalidInput(format!(
                "model `{}` expects constants {:?}, dataset has {:?}",
                self.name(),
                names,
                data.constant_names()
            )));
        }
        Ok(())
    }
}

/// Logistic growth curve `phi_1 / (1 + exp(-(v - phi_2) / alpha))`.
pub fn mean_logistic(alpha: f64, v: f64, phi: &[f64]) -> f64 {
    phi[0] / (1.0 + (-(v - phi[1]) / alpha).exp())
}

/// One-compartment oral-dose concentration with absorption rate `phi_1` and
/// clearance `phi_2`:
/// `D phi_1 / (V (phi_1 - phi_2 / V)) * (exp(-(phi_2 / V) v) - exp(-phi_1 v))`.
pub fn mean_pharma(v: f64, phi: &[f64], dose: f64, volume: f64) -> Result<f64> {
    let value = pharma_mean_grad(v, phi, dose, volume, None);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!(
            "absorption rate {} too close to elimination rate {}",
            phi[0],
            phi[1] / volume
        )))
    }
}

/// `phi_1 + phi_2 v`.
pub fn mean_linear(v: f64, phi: &[f64]) -> f64 {
    phi[0] + phi[1] * v
}

/// Smallest admissible gap between absorption and elimination rates.
pub const PHARMA_RATE_GAP: f64 = 1e-10;

fn pharma_mean_grad(v: f64, phi: &[f64], dose: f64, volume: f64, d_phi: Option<&mut [f64]>) -> f64 {
    let ka = phi[0];
    let ke = phi[1] / volume;
    let gap = ka - ke;
    if gap.abs() < PHARMA_RATE_GAP || volume == 0.0 {
        return f64::NAN;
    }
    let c = dose / volume;
    let f = ka / gap;
    let e_ke = (-ke * v).exp();
    let e_ka = (-ka * v).exp();
    let diff = e_ke - e_ka;
    if let Some(d) = d_phi {
        let gap_sq = gap * gap;
        d[0] = c * (-ke / gap_sq * diff + f * v * e_ka);
        d[1] = c * (ka / gap_sq * diff - f * v * e_ke) / volume;
    }
    c * f * diff
}

/// Linear mixed-effects model `Y_ij = phi_i1 + phi_i2 V_ij + eps_ij`, with
/// covariates on the intercept.
#[derive(Debug, Clone, Default)]
pub struct LinearModel;

const LATENT_FIRST: [BetaTarget; 1] = [BetaTarget::Latent(0)];
const LATENT_SECOND: [BetaTarget; 1] = [BetaTarget::Latent(1)];
const LATENT_BOTH: [BetaTarget; 2] = [BetaTarget::Latent(0), BetaTarget::Latent(1)];
const OBSERVATION: [BetaTarget; 1] = [BetaTarget::Observation];

impl ModelDefinition for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn latent_dim(&self) -> usize {
        2
    }
    fn fixed_dim(&self) -> usize {
        0
    }
    fn beta_targets(&self) -> &[BetaTarget] {
        &LATENT_FIRST
    }
    fn mean(&self, _alpha: &[f64], v: f64, phi: &[f64], _consts: &[f64]) -> f64 {
        mean_linear(v, phi)
    }
    fn mean_grad(&self, _a: &[f64], v: f64, phi: &[f64], _c: &[f64], _da: &mut [f64], d_phi: &mut [f64]) -> f64 {
        d_phi[0] = 1.0;
        d_phi[1] = v;
        mean_linear(v, phi)
    }
    fn linear_loading(&self, _alpha: &[f64], v: f64, _consts: &[f64], w: &mut [f64]) -> Option<f64> {
        w[0] = 1.0;
        w[1] = v;
        Some(0.0)
    }

    /// Per-individual least squares on `(1, t)`, then moments across individuals.
    fn initial_guess(&self, data: &Dataset) -> Option<InitialGuess> {
        let mut fits = Vec::new();
        let mut rss = 0.0;
        let mut dof = 0usize;
        for ind in data.individuals() {
            let obs: Vec<usize> = ind.observed_indices().collect();
            if obs.len() < 3 {
                continue;
            }
            let n = obs.len() as f64;
            let tm = obs.iter().map(|&j| ind.times[j]).sum::<f64>() / n;
            let ym = obs.iter().map(|&j| ind.y[j]).sum::<f64>() / n;
            let stt: f64 = obs.iter().map(|&j| (ind.times[j] - tm).powi(2)).sum();
            if stt <= 0.0 {
                continue;
            }
            let sty: f64 = obs.iter().map(|&j| (ind.times[j] - tm) * (ind.y[j] - ym)).sum();
            let slope = sty / stt;
            let icpt = ym - slope * tm;
            rss += obs.iter().map(|&j| (ind.y[j] - icpt - slope * ind.times[j]).powi(2)).sum::<f64>();
            dof += obs.len() - 2;
            fits.push([icpt, slope]);
        }
        if fits.len() < 2 || dof == 0 {
            return None;
        }
        let (mu, var) = column_moments(&fits);
        Some(InitialGuess {
            alpha: vec![],
            mu,
            gamma_sq: var.iter().map(|v| v.max(1e-6)).collect(),
            sigma_sq: (rss / dof as f64).max(1e-8),
        })
    }
}

fn column_moments(rows: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; 2];
    for r in rows {
        mean[0] += r[0] / n;
        mean[1] += r[1] / n;
    }
    let mut var = vec![0.0; 2];
    for r in rows {
        var[0] += (r[0] - mean[0]).powi(2) / (n - 1.0);
        var[1] += (r[1] - mean[1]).powi(2) / (n - 1.0);
    }
    (mean, var)
}

/// Logistic growth model with a population growth-rate parameter `alpha` and
/// covariates on the midpoint `phi_2`.
#[derive(Debug, Clone, Default)]
pub struct LogisticModel;

impl ModelDefinition for LogisticModel {
    fn name(&self) -> &str {
        "logistic"
    }
    fn latent_dim(&self) -> usize {
        2
    }
    fn fixed_dim(&self) -> usize {
        1
    }
    fn beta_targets(&self) -> &[BetaTarget] {
        &LATENT_SECOND
    }
    fn mean(&self, alpha: &[f64], v: f64, phi: &[f64], _consts: &[f64]) -> f64 {
        if alpha[0] == 0.0 {
            return f64::NAN;
        }
        mean_logistic(alpha[0], v, phi)
    }
    fn mean_grad(&self, alpha: &[f64], v: f64, phi: &[f64], _c: &[f64], d_alpha: &mut [f64], d_phi: &mut [f64]) -> f64 {
        let a = alpha[0];
        if a == 0.0 {
            return f64::NAN;
        }
        let centered = v - phi[1];
        let s = 1.0 / (1.0 + (-centered / a).exp());
        let ds = s * (1.0 - s);
        d_phi[0] = s;
        d_phi[1] = -phi[0] * ds / a;
        d_alpha[0] = -phi[0] * ds * centered / (a * a);
        phi[0] * s
    }

    /// Crude curve reading per individual: plateau from the late
    /// observations, midpoint from the half-plateau crossing, rate from the
    /// quartile crossings.
    fn initial_guess(&self, data: &Dataset) -> Option<InitialGuess> {
        let mut fits = Vec::new();
        let mut rates = Vec::new();
        for ind in data.individuals() {
            let obs: Vec<(f64, f64)> = ind.observed_indices().map(|j| (ind.times[j], ind.y[j])).collect();
            if obs.len() < 4 {
                continue;
            }
            let plateau = obs.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
            if plateau <= 0.0 {
                continue;
            }
            let crossing = |level: f64| -> Option<f64> {
                obs.windows(2).find_map(|w| {
                    let (t0, y0) = w[0];
                    let (t1, y1) = w[1];
                    (y0 <= level && y1 >= level && y1 > y0).then(|| t0 + (level - y0) * (t1 - t0) / (y1 - y0))
                })
            };
            let (Some(mid), Some(q1), Some(q3)) =
                (crossing(0.5 * plateau), crossing(0.25 * plateau), crossing(0.75 * plateau))
            else {
                continue;
            };
            fits.push([plateau, mid]);
            if q3 > q1 {
                rates.push((q3 - q1) / (2.0 * 3f64.ln()));
            }
        }
        if fits.len() < 2 || rates.is_empty() {
            return None;
        }
        rates.sort_by(f64::total_cmp);
        let alpha = rates[rates.len() / 2];
        let (mu, var) = column_moments(&fits);
        let mut rss = 0.0;
        let mut n = 0usize;
        for ind in data.individuals() {
            for j in ind.observed_indices() {
                rss += (ind.y[j] - mean_logistic(alpha, ind.times[j], &mu)).powi(2);
                n += 1;
            }
        }
        Some(InitialGuess {
            alpha: vec![alpha],
            mu,
            gamma_sq: var.iter().map(|v| v.max(1e-6)).collect(),
            sigma_sq: (rss / n as f64).max(1e-8),
        })
    }
}

/// One-compartment pharmacokinetic model with known dose and volume per
/// individual; covariates act on both the absorption rate and the clearance.
#[derive(Debug, Clone, Default)]
pub struct PharmaModel;

const PHARMA_CONSTANTS: [&str; 2] = ["dose", "volume"];

impl ModelDefinition for PharmaModel {
    fn name(&self) -> &str {
        "pharma"
    }
    fn latent_dim(&self) -> usize {
        2
    }
    fn fixed_dim(&self) -> usize {
        0
    }
    fn beta_targets(&self) -> &[BetaTarget] {
        &LATENT_BOTH
    }
    fn constant_names(&self) -> &[&'static str] {
        &PHARMA_CONSTANTS
    }
    fn mean(&self, _alpha: &[f64], v: f64, phi: &[f64], consts: &[f64]) -> f64 {
        pharma_mean_grad(v, phi, consts[0], consts[1], None)
    }
    fn mean_grad(&self, _a: &[f64], v: f64, phi: &[f64], consts: &[f64], _da: &mut [f64], d_phi: &mut [f64]) -> f64 {
        pharma_mean_grad(v, phi, consts[0], consts[1], Some(d_phi))
    }
}

/// Linear toy model `Y_i = X_i beta + W phi_i + eps_i` with observation-level
/// covariates, zero latent mean and known variances; only `beta` is estimated.
#[derive(Debug, Clone, Default)]
pub struct ToyModel;

impl ModelDefinition for ToyModel {
    fn name(&self) -> &str {
        "toy"
    }
    fn latent_dim(&self) -> usize {
        1
    }
    fn fixed_dim(&self) -> usize {
        0
    }
    fn covariate_level(&self) -> CovariateLevel {
        CovariateLevel::Observation
    }
    fn beta_targets(&self) -> &[BetaTarget] {
        &OBSERVATION
    }
    fn mean(&self, _alpha: &[f64], _v: f64, phi: &[f64], _consts: &[f64]) -> f64 {
        phi[0]
    }
    fn mean_grad(&self, _a: &[f64], _v: f64, phi: &[f64], _c: &[f64], _da: &mut [f64], d_phi: &mut [f64]) -> f64 {
        d_phi[0] = 1.0;
        phi[0]
    }
    fn linear_loading(&self, _alpha: &[f64], _v: f64, _consts: &[f64], w: &mut [f64]) -> Option<f64> {
        w[0] = 1.0;
        Some(0.0)
    }
    fn frozen(&self) -> Frozen {
        Frozen {
            alpha: true,
            mu: true,
            variances: true,
        }
    }
}

/// Model restricted to a support: coefficients outside the mask stay at zero.
pub struct RestrictedModel<'a> {
    inner: &'a dyn ModelDefinition,
    mask: Vec<bool>,
}

impl<'a> RestrictedModel<'a> {
    pub fn new(inner: &'a dyn ModelDefinition, mask: Vec<bool>) -> Self {
        RestrictedModel { inner, mask }
    }
}

impl ModelDefinition for RestrictedModel<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }
    fn fixed_dim(&self) -> usize {
        self.inner.fixed_dim()
    }
    fn covariate_level(&self) -> CovariateLevel {
        self.inner.covariate_level()
    }
    fn beta_targets(&self) -> &[BetaTarget] {
        self.inner.beta_targets()
    }
    fn constant_names(&self) -> &[&'static str] {
        self.inner.constant_names()
    }
    fn mean(&self, alpha: &[f64], v: f64, phi: &[f64], consts: &[f64]) -> f64 {
        self.inner.mean(alpha, v, phi, consts)
    }
    fn mean_grad(&self, alpha: &[f64], v: f64, phi: &[f64], consts: &[f64], da: &mut [f64], dp: &mut [f64]) -> f64 {
        self.inner.mean_grad(alpha, v, phi, consts, da, dp)
    }
    fn linear_loading(&self, alpha: &[f64], v: f64, consts: &[f64], w: &mut [f64]) -> Option<f64> {
        self.inner.linear_loading(alpha, v, consts, w)
    }
    fn frozen(&self) -> Frozen {
        self.inner.frozen()
    }
    fn beta_mask(&self) -> Option<&[bool]> {
        Some(&self.mask)
    }
    fn initial_guess(&self, data: &Dataset) -> Option<InitialGuess> {
        self.inner.initial_guess(data)
    }
}

/// Named model choice used by configuration files and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Logistic,
    Pharma,
    Toy,
}

impl ModelKind {
    pub fn build(self) -> Box<dyn ModelDefinition> {
        match self {
            ModelKind::Linear => Box::new(LinearModel),
            ModelKind::Logistic => Box::new(LogisticModel),
            ModelKind::Pharma => Box::new(PharmaModel),
            ModelKind::Toy => Box::new(ToyModel),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::Pharma => "pharma",
            ModelKind::Toy => "toy",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "lmem" => Ok(ModelKind::Linear),
            "logistic" => Ok(ModelKind::Logistic),
            "pharma" => Ok(ModelKind::Pharma),
            "toy" => Ok(ModelKind::Toy),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_midpoint_is_half_plateau() {
        assert_eq!(mean_logistic(300.0, 1200.0, &[200.0, 1200.0]), 100.0);
        assert_eq!(mean_logistic(7.0, -3.0, &[5.0, -3.0]), 2.5);
    }

    #[test]
    fn logistic_saturates_at_plateau() {
        let far = mean_logistic(300.0, 1e6, &[200.0, 1200.0]);
        assert!((far - 200.0).abs() < 1e-9);
        assert_eq!(mean_logistic(300.0, -1e6, &[200.0, 1200.0]), 0.0);
    }

    #[test]
    fn pharma_is_zero_at_dose_time() {
        assert_eq!(mean_pharma(0.0, &[6.0, 8.0], 10.0, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn pharma_degenerate_rates_are_domain_errors() {
        assert!(mean_pharma(1.0, &[0.08, 8.0], 10.0, 100.0).is_err());
        assert!(PharmaModel.mean(&[], 1.0, &[0.08, 8.0], &[10.0, 100.0]).is_nan());
        assert!(mean_pharma(1.0, &[0.08 + 1e-6, 8.0], 10.0, 100.0).is_ok());
    }

    #[test]
    fn pharma_matches_textbook_one_compartment() {
        // ka = 1.5, CL = 2.8, V = 32: C = D ka / (V ka - CL) (e^{-CL t / V} - e^{-ka t})
        let (ka, cl, vol, dose, t) = (1.5f64, 2.8f64, 32.0f64, 320.0f64, 3.0f64);
        let expected = dose * ka / (vol * ka - cl) * ((-cl / vol * t).exp() - (-ka * t).exp());
        let got = mean_pharma(t, &[ka, cl], dose, vol).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn linear_mean() {
        assert_eq!(mean_linear(0.5, &[2.0, 4.0]), 4.0);
    }

    #[test]
    fn mean_grad_matches_finite_differences() {
        let cases: Vec<(Box<dyn ModelDefinition>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> = vec![
            (Box::new(LogisticModel), vec![280.0], vec![190.0, 1100.0], vec![], 900.0),
            (Box::new(PharmaModel), vec![], vec![5.5, 9.0], vec![10.0, 100.0], 1.7),
            (Box::new(LinearModel), vec![], vec![1.0, 2.0], vec![], 0.3),
        ];
        for (m, alpha, phi, consts, v) in cases {
            let mut da = vec![0.0; alpha.len()];
            let mut dp = vec![0.0; phi.len()];
            let value = m.mean_grad(&alpha, v, &phi, &consts, &mut da, &mut dp);
            assert!((value - m.mean(&alpha, v, &phi, &consts)).abs() < 1e-12 * value.abs().max(1.0));
            for k in 0..phi.len() {
                let h = 1e-6 * phi[k].abs().max(1.0);
                let mut up = phi.clone();
                let mut dn = phi.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (m.mean(&alpha, v, &up, &consts) - m.mean(&alpha, v, &dn, &consts)) / (2.0 * h);
                assert!((fd - dp[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{} phi {k}: {fd} vs {}", m.name(), dp[k]);
            }
            for k in 0..alpha.len() {
                let h = 1e-6 * alpha[k].abs().max(1.0);
                let mut up = alpha.clone();
                let mut dn = alpha.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (m.mean(&up, v, &phi, &consts) - m.mean(&dn, v, &phi, &consts)) / (2.0 * h);
                assert!((fd - da[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn free_mask_respects_frozen_blocks_and_beta_mask() {
        let toy = ToyModel;
        let mask = toy.free_mask(3);
        let layout = toy.layout(3);
        for (i, &m) in mask.iter().enumerate() {
            assert_eq!(m, layout.is_penalized(i));
        }
        let lin = LinearModel;
        let restricted = RestrictedModel::new(&lin, vec![true, false]);
        let mask = restricted.free_mask(2);
        let layout = restricted.layout(2);
        assert!(mask[layout.beta_index(0, 0)]);
        assert!(!mask[layout.beta_index(0, 1)]);
        assert!(mask[layout.log_sigma_index()]);
    }

    #[test]
    fn linearity_flags() {
        assert!(LinearModel.is_linear_in_latent());
        assert!(ToyModel.is_linear_in_latent());
        assert!(!LogisticModel.is_linear_in_latent());
        assert!(!PharmaModel.is_linear_in_latent());
    }
}
