use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Flat-coordinate layout of a [`ParameterVector`]:
/// `[alpha (a) | mu (q) | beta row-major (rows * p) | log gamma_sq (q) | log sigma_sq]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub fixed_dim: usize,
    pub latent_dim: usize,
    pub beta_rows: usize,
    pub n_covariates: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.fixed_dim + 2 * self.latent_dim + self.beta_rows * self.n_covariates + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha_range(&self) -> Range<usize> {
        0..self.fixed_dim
    }

    pub fn mu_range(&self) -> Range<usize> {
        let s = self.fixed_dim;
        s..s + self.latent_dim
    }

    pub fn beta_range(&self) -> Range<usize> {
        let s = self.fixed_dim + self.latent_dim;
        s..s + self.beta_rows * self.n_covariates
    }

    pub fn log_gamma_range(&self) -> Range<usize> {
        let s = self.beta_range().end;
        s..s + self.latent_dim
    }

    pub fn log_sigma_index(&self) -> usize {
        self.len() - 1
    }

    pub fn beta_index(&self, row: usize, col: usize) -> usize {
        self.beta_range().start + row * self.n_covariates + col
    }

    /// Inverse of [`Layout::beta_index`] for an offset inside the beta block.
    pub fn beta_entry(&self, offset: usize) -> (usize, usize) {
        (offset / self.n_covariates, offset % self.n_covariates)
    }

    pub fn is_penalized(&self, idx: usize) -> bool {
        self.beta_range().contains(&idx)
    }

    pub fn penalized_indices(&self) -> Range<usize> {
        self.beta_range()
    }

    /// Human-readable 1-based coordinate name.
    pub fn coord_name(&self, idx: usize) -> String {
        if self.alpha_range().contains(&idx) {
            format!("alpha[{}]", idx + 1)
        } else if self.mu_range().contains(&idx) {
            format!("mu[{}]", idx - self.mu_range().start + 1)
        } else if self.beta_range().contains(&idx) {
            let (r, c) = self.beta_entry(idx - self.beta_range().start);
            if self.beta_rows == 1 {
                format!("beta[{}]", c + 1)
            } else {
                format!("beta[{},{}]", r + 1, c + 1)
            }
        } else if self.log_gamma_range().contains(&idx) {
            format!("gamma_sq[{}]", idx - self.log_gamma_range().start + 1)
        } else {
            "sigma_sq".to_string()
        }
    }
}

/// Model parameter `theta = (alpha, mu, beta, Gamma, sigma^2)` with diagonal
/// `Gamma`. Variances are held on the log scale so that the flat layout is an
/// exact bijection and positivity holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    /// `beta_rows x p`.
    pub beta: DMatrix<f64>,
    log_gamma_sq: Vec<f64>,
    log_sigma_sq: f64,
}

impl ParameterVector {
    pub fn new(
        alpha: Vec<f64>,
        mu: Vec<f64>,
        beta: DMatrix<f64>,
        gamma_sq: Vec<f64>,
        sigma_sq: f64,
    ) -> Result<Self> {
        if mu.len() != gamma_sq.len() {
            return Err(Error::InvalidInput("mu and gamma_sq lengths differ".into()));
        }
        if gamma_sq.iter().any(|&g| !(g > 0.0 && g.is_finite())) || !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::InvalidInput("variances must be positive and finite".into()));
        }
        Ok(ParameterVector {
            alpha,
            mu,
            beta,
            log_gamma_sq: gamma_sq.iter().map(|g| g.ln()).collect(),
            log_sigma_sq: sigma_sq.ln(),
        })
    }

    /// All-zero `beta` of the given shape.
    pub fn with_zero_beta(
        alpha: Vec<f64>,
        mu: Vec<f64>,
        beta_rows: usize,
        p: usize,
        gamma_sq: Vec<f64>,
        sigma_sq: f64,
    ) -> Result<Self> {
        Self::new(alpha, mu, DMatrix::zeros(beta_rows, p), gamma_sq, sigma_sq)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            fixed_dim: self.alpha.len(),
            latent_dim: self.mu.len(),
            beta_rows: self.beta.nrows(),
            n_covariates: self.beta.ncols(),
        }
    }

    pub fn gamma_sq(&self, k: usize) -> f64 {
        self.log_gamma_sq[k].exp()
    }

    pub fn gamma_sq_vec(&self) -> Vec<f64> {
        self.log_gamma_sq.iter().map(|l| l.exp()).collect()
    }

    pub fn log_gamma_sq(&self) -> &[f64] {
        &self.log_gamma_sq
    }

    pub fn sigma_sq(&self) -> f64 {
        self.log_sigma_sq.exp()
    }

    pub fn log_sigma_sq(&self) -> f64 {
        self.log_sigma_sq
    }

    pub fn set_gamma_sq(&mut self, k: usize, value: f64) {
        assert!(value > 0.0, "variance must be positive");
        self.log_gamma_sq[k] = value.ln();
    }

    pub fn set_sigma_sq(&mut self, value: f64) {
        assert!(value > 0.0, "variance must be positive");
        self.log_sigma_sq = value.ln();
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.mu);
        for r in 0..self.beta.nrows() {
            out.extend(self.beta.row(r).iter().copied());
        }
        out.extend_from_slice(&self.log_gamma_sq);
        out.push(self.log_sigma_sq);
        out
    }

    pub fn unflatten(layout: &Layout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "flat vector has {} coordinates, layout expects {}",
                flat.len(),
                layout.len()
            )));
        }
        let beta_block = &flat[layout.beta_range()];
        let beta = DMatrix::from_row_slice(layout.beta_rows, layout.n_covariates, beta_block);
        Ok(ParameterVector {
            alpha: flat[layout.alpha_range()].to_vec(),
            mu: flat[layout.mu_range()].to_vec(),
            beta,
            log_gamma_sq: flat[layout.log_gamma_range()].to_vec(),
            log_sigma_sq: flat[layout.log_sigma_index()],
        })
    }

    /// In-place variant of [`ParameterVector::unflatten`] for a matching layout.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let layout = self.layout();
        debug_assert_eq!(flat.len(), layout.len());
        self.alpha.copy_from_slice(&flat[layout.alpha_range()]);
        self.mu.copy_from_slice(&flat[layout.mu_range()]);
        let start = layout.beta_range().start;
        let p = layout.n_covariates;
        for r in 0..layout.beta_rows {
            for c in 0..p {
                self.beta[(r, c)] = flat[start + r * p + c];
            }
        }
        self.log_gamma_sq.copy_from_slice(&flat[layout.log_gamma_range()]);
        self.log_sigma_sq = flat[layout.log_sigma_index()];
    }

    /// Named `(coordinate, value)` pairs with variances on their natural scale.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let layout = self.layout();
        let flat = self.flatten();
        (0..layout.len())
            .map(|idx| {
                let v = if idx >= layout.log_gamma_range().start { flat[idx].exp() } else { flat[idx] };
                (layout.coord_name(idx), v)
            })
            .collect()
    }
}

/// Current draw of the individual parameters `phi` (N x q) plus per-individual
/// Metropolis–Hastings counters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub phi: DMatrix<f64>,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
}

impl LatentState {
    pub fn new(phi: DMatrix<f64>) -> Self {
        let n = phi.nrows();
        LatentState {
            phi,
            accepted: vec![0; n],
            proposed: vec![0; n],
        }
    }

    pub fn phi_row(&self, i: usize) -> Vec<f64> {
        self.phi.row(i).iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().all(|x| x.is_finite())
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.proposed)
            .map(|(&a, &p)| if p == 0 { 0.0 } else { a as f64 / p as f64 })
            .collect()
    }

    pub fn reset_counters(&mut self) {
        self.accepted.iter_mut().for_each(|a| *a = 0);
        self.proposed.iter_mut().for_each(|p| *p = 0);
    }
}
