//! Exactly solvable linear toy model `Y_i = X_i beta + W phi_i + eps_i` with
//! `W` the all-ones vector, `phi_i ~ N(0, gamma^2)` and known variances.
//!
//! When every individual's covariate block is column-centred and the stacked
//! design is orthonormal, the marginal log-likelihood in `beta` is
//! `-(1/2 sigma^2) |Y - X beta|^2` up to a constant, so the penalized
//! maximizer is a soft threshold of the least-squares estimate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateLevel, Dataset, Individual, ParameterVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub n: usize,
    pub j: usize,
    pub p: usize,
    pub gamma_sq: f64,
    pub sigma_sq: f64,
    /// Leading nonzero coefficients; the rest are zero.
    pub beta_true: Vec<f64>,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            n: 100,
            j: 5,
            p: 200,
            gamma_sq: 16.0,
            sigma_sq: 4.0,
            beta_true: vec![4.0, -3.0],
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::Config("toy model needs at least two observations per individual".into()));
        }
        if !(self.gamma_sq > 0.0 && self.sigma_sq > 0.0) {
            return Err(Error::Config("toy variances must be positive".into()));
        }
        if self.beta_true.len() > self.p || self.n == 0 || self.p == 0 {
            return Err(Error::Config("toy dimensions are inconsistent".into()));
        }
        Ok(())
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.p);
        for (k, &v) in self.beta_true.iter().enumerate() {
            b[k] = v;
        }
        b
    }

    pub fn true_support(&self) -> Vec<usize> {
        self.beta_true
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| (v != 0.0).then_some(k))
            .collect()
    }

    /// Parameter with the known variances, zero latent mean and the given `beta`.
    pub fn theta(&self, beta: &[f64]) -> Result<ParameterVector> {
        ParameterVector::new(
            vec![],
            vec![0.0],
            DMatrix::from_row_slice(1, self.p, beta),
            vec![self.gamma_sq],
            self.sigma_sq,
        )
    }
}

/// Stacked `N J x p` design with `X^T X = I` and zero column sums within every
/// individual block: centre i.i.d. Gaussian blocks, then whiten with the
/// Cholesky factor of their Gram matrix.
pub fn build_orthogonal_centered_design<R: Rng + ?Sized>(n: usize, j: usize, p: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if n * (j.saturating_sub(1)) < p {
        return Err(Error::InvalidInput(format!(
            "centred design of {n} x {j} rows has rank at most {}, below p = {p}; increase N or J",
            n * j.saturating_sub(1)
        )));
    }
    let mut v = DMatrix::from_fn(n * j, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        for c in 0..p {
            let mean = (0..j).map(|r| v[(i * j + r, c)]).sum::<f64>() / j as f64;
            for r in 0..j {
                v[(i * j + r, c)] -= mean;
            }
        }
    }
    let gram = v.tr_mul(&v);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("centred Gram matrix is not positive definite; increase N or J".into()))?;
    // X = V L^{-T}, i.e. X^T = L^{-1} V^T.
    let xt = chol
        .l()
        .solve_lower_triangular(&v.transpose())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok(xt.transpose())
}

/// `max |X^T X - I|`.
pub fn orthogonality_residual(x: &DMatrix<f64>) -> f64 {
    let g = x.tr_mul(x);
    let p = g.nrows();
    let mut worst = 0.0f64;
    for r in 0..p {
        for c in 0..p {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - target).abs());
        }
    }
    worst
}

/// `max_{i,l} |sum_j X_ijl|` over individual blocks of `j` rows.
pub fn centering_residual(x: &DMatrix<f64>, j: usize) -> f64 {
    let n = x.nrows() / j;
    let mut worst = 0.0f64;
    for i in 0..n {
        for c in 0..x.ncols() {
            let s: f64 = (0..j).map(|r| x[(i * j + r, c)]).sum();
            worst = worst.max(s.abs());
        }
    }
    worst
}

/// Marginal covariance `sigma^2 I + gamma^2 W W^T` of one individual.
pub fn marginal_covariance(sigma_sq: f64, gamma_sq: f64, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(j, j, |r, c| gamma_sq + if r == c { sigma_sq } else { 0.0 })
}

/// Closed-form inverse of the marginal covariance:
/// `(1/sigma^2) I - gamma^2 / (sigma^2 (J gamma^2 + sigma^2)) W W^T`.
pub fn woodbury_inverse(sigma_sq: f64, gamma_sq: f64, j: usize) -> DMatrix<f64> {
    let off = gamma_sq / (sigma_sq * (j as f64 * gamma_sq + sigma_sq));
    DMatrix::from_fn(j, j, |r, c| if r == c { 1.0 / sigma_sq } else { 0.0 } - off)
}

/// Least squares for an orthonormal design: `X^T Y`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    x.tr_mul(y)
}

/// Componentwise soft threshold `sgn(b) (|b| - lambda)_+`.
pub fn exact_lasso(beta_ols: &DVector<f64>, lambda: f64) -> DVector<f64> {
    beta_ols.map(|b| {
        if b.abs() <= lambda {
            0.0
        } else {
            b.signum() * (b.abs() - lambda)
        }
    })
}

/// Maximizer of `log g(beta) - lambda |beta|_1` for the toy model under the
/// centring and orthonormality assumptions: the threshold is `sigma^2 lambda`.
pub fn toy_exact_solution(beta_ols: &DVector<f64>, sigma_sq: f64, lambda: f64) -> DVector<f64> {
    exact_lasso(beta_ols, sigma_sq * lambda)
}

/// `-(1/2 sigma^2) sum_i |Y_i - X_i beta|^2 - lambda |beta|_1`, valid for
/// centred designs.
pub fn toy_penalized_criterion(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_sq: f64,
    lambda: f64,
) -> f64 {
    let r = y - x * beta;
    -r.norm_squared() / (2.0 * sigma_sq) - lambda * beta.lp_norm(1)
}

/// Same criterion for an arbitrary design, keeping the `W W^T` term of the
/// inverse covariance: `-(1/2) sum_i r_i^T Gamma^{-1} r_i - lambda |beta|_1`.
pub fn toy_penalized_criterion_general(
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_sq: f64,
    gamma_sq: f64,
    j: usize,
    lambda: f64,
) -> f64 {
    let r = y - x * beta;
    let n = r.len() / j;
    let coef = gamma_sq / (2.0 * sigma_sq * (j as f64 * gamma_sq + sigma_sq));
    let correction: f64 = (0..n)
        .map(|i| {
            let s: f64 = (0..j).map(|t| r[i * j + t]).sum();
            s * s
        })
        .sum();
    -r.norm_squared() / (2.0 * sigma_sq) + coef * correction - lambda * beta.lp_norm(1)
}

/// A simulated toy dataset with its design and stacked response.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub data: Dataset,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub phi: DVector<f64>,
}

/// Draws an orthonormal centred design and responses from the toy model.
pub fn simulate_toy<R: Rng + ?Sized>(spec: &ToyModelSpec, rng: &mut R) -> Result<ToyData> {
    spec.validate()?;
    let x = build_orthogonal_centered_design(spec.n, spec.j, spec.p, rng)?;
    let beta = spec.beta_vector();
    let mean = &x * &beta;
    let (g, s) = (spec.gamma_sq.sqrt(), spec.sigma_sq.sqrt());
    let phi = DVector::from_fn(spec.n, |_, _| g * rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(spec.n * spec.j, |r, _| {
        mean[r] + phi[r / spec.j] + s * rng.sample::<f64, _>(StandardNormal)
    });
    let times: Vec<f64> = (0..spec.j).map(|t| t as f64).collect();
    let individuals = (0..spec.n)
        .map(|i| Individual::new(times.clone(), y.rows(i * spec.j, spec.j).iter().copied().collect()))
        .collect();
    let data = Dataset::new(individuals, x.clone(), CovariateLevel::Observation, vec![])?;
    Ok(ToyData { data, x, y, phi })
}

/// Selection regime of an estimated support relative to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Exact,
    Over,
    Under,
    /// Misses true coefficients and selects false ones.
    Mixed,
}

impl Regime {
    pub fn classify(estimated: &[usize], truth: &[usize]) -> Regime {
        let missing = truth.iter().any(|t| !estimated.contains(t));
        let extra = estimated.iter().any(|e| !truth.contains(e));
        match (missing, extra) {
            (false, false) => Regime::Exact,
            (false, true) => Regime::Over,
            (true, false) => Regime::Under,
            (true, true) => Regime::Mixed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Exact => "exact",
            Regime::Over => "over",
            Regime::Under => "under",
            Regime::Mixed => "mixed",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn woodbury_without_random_effect_is_scaled_identity() {
        let inv = woodbury_inverse(2.0, 0.0, 3);
        assert_eq!(inv, DMatrix::identity(3, 3) * 0.5);
    }

    #[test]
    fn woodbury_matches_product_identity() {
        let g = marginal_covariance(4.0, 16.0, 5);
        let prod = g * woodbury_inverse(4.0, 16.0, 5);
        assert!((prod - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn soft_threshold_edges() {
        let b = DVector::from_vec(vec![3.0, -0.5, -4.0]);
        assert_eq!(exact_lasso(&b, 0.0), b);
        assert_eq!(exact_lasso(&b, 4.0), DVector::zeros(3));
        assert_eq!(exact_lasso(&b, 1.0), DVector::from_vec(vec![2.0, 0.0, -3.0]));
    }

    #[test]
    fn single_column_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = build_orthogonal_centered_design(4, 3, 1, &mut rng).unwrap();
        assert!((x.norm() - 1.0).abs() < 1e-12);
        assert!(centering_residual(&x, 3) < 1e-12);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(build_orthogonal_centered_design(2, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn regimes() {
        assert_eq!(Regime::classify(&[0, 1], &[0, 1]), Regime::Exact);
        assert_eq!(Regime::classify(&[0, 1, 7], &[0, 1]), Regime::Over);
        assert_eq!(Regime::classify(&[0], &[0, 1]), Regime::Under);
        assert_eq!(Regime::classify(&[0, 9], &[0, 1]), Regime::Mixed);
    }
}
