use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Where the high-dimensional covariates enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateLevel {
    /// One row per individual; `X_i beta` shifts the latent mean.
    Individual,
    /// One row per observation `(i, j)`; `X_ij beta` shifts the observation mean.
    Observation,
}

/// Repeated measurements of one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub observed: Vec<bool>,
    /// Per-individual constants, ordered as [`Dataset::constant_names`].
    pub constants: Vec<f64>,
}

impl Individual {
    pub fn new(times: Vec<f64>, y: Vec<f64>) -> Self {
        let observed = vec![true; y.len()];
        Individual {
            times,
            y,
            observed,
            constants: Vec::new(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn observed_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(j, &o)| o.then_some(j))
    }
}

/// Observations, within-individual covariates (times), high-dimensional
/// covariates and censoring mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    individuals: Vec<Individual>,
    covariates: DMatrix<f64>,
    level: CovariateLevel,
    /// First covariate row of each individual (observation level only).
    row_offsets: Vec<usize>,
    constant_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        individuals: Vec<Individual>,
        covariates: DMatrix<f64>,
        level: CovariateLevel,
        constant_names: Vec<String>,
    ) -> Result<Self> {
        if individuals.is_empty() {
            return Err(Error::InvalidInput("dataset has no individuals".into()));
        }
        if covariates.ncols() == 0 {
            return Err(Error::InvalidInput("covariate matrix has no columns".into()));
        }
        let mut row_offsets = Vec::with_capacity(individuals.len());
        let mut rows = 0;
        for (i, ind) in individuals.iter().enumerate() {
            let j = ind.n_obs();
            if j == 0 {
                return Err(Error::InvalidInput(format!("individual {i} has no observations")));
            }
            if ind.times.len() != j || ind.observed.len() != j {
                return Err(Error::InvalidInput(format!(
                    "individual {i}: times/y/observed lengths differ"
                )));
            }
            if ind.constants.len() != constant_names.len() {
                return Err(Error::InvalidInput(format!(
                    "individual {i}: expected {} constants, got {}",
                    constant_names.len(),
                    ind.constants.len()
                )));
            }
            for jj in ind.observed_indices() {
                if !ind.y[jj].is_finite() || !ind.times[jj].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "individual {i}, observation {jj}: observed value is not finite"
                    )));
                }
            }
            row_offsets.push(rows);
            rows += j;
        }
        let expected_rows = match level {
            CovariateLevel::Individual => individuals.len(),
            CovariateLevel::Observation => rows,
        };
        if covariates.nrows() != expected_rows {
            return Err(Error::InvalidInput(format!(
                "covariate matrix has {} rows, expected {expected_rows}",
                covariates.nrows()
            )));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("covariates contain non-finite values".into()));
        }
        for (l, col) in covariates.column_iter().enumerate() {
            if col.iter().all(|&x| x == 0.0) {
                log::warn!("covariate column {} is identically zero", l + 1);
            }
        }
        Ok(Dataset {
            individuals,
            covariates,
            level,
            row_offsets,
            constant_names,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn individual(&self, i: usize) -> &Individual {
        &self.individuals[i]
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn level(&self) -> CovariateLevel {
        self.level
    }

    pub fn constant_names(&self) -> &[String] {
        &self.constant_names
    }

    /// First covariate row of individual `i` when covariates are per observation.
    pub fn row_offset(&self, i: usize) -> usize {
        self.row_offsets[i]
    }

    pub fn total_rows(&self) -> usize {
        self.individuals.iter().map(Individual::n_obs).sum()
    }

    /// Number of observed `(i, j)` pairs.
    pub fn n_observed(&self) -> usize {
        self.individuals.iter().map(Individual::n_observed).sum()
    }

    /// Same data with only the given covariate columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Dataset> {
        let p = self.n_covariates();
        if let Some(&bad) = columns.iter().find(|&&c| c >= p) {
            return Err(Error::InvalidInput(format!("covariate column {bad} out of range")));
        }
        let n = self.covariates.nrows();
        let covariates = if columns.is_empty() {
            // Keep a single zero column so the matrix stays well formed; the
            // corresponding coefficients are frozen at zero by the caller.
            DMatrix::zeros(n, 1)
        } else {
            self.covariates.select_columns(columns)
        };
        Ok(Dataset {
            individuals: self.individuals.clone(),
            covariates,
            level: self.level,
            row_offsets: self.row_offsets.clone(),
            constant_names: self.constant_names.clone(),
        })
    }

    /// Replaces the observation mask of every individual.
    pub fn with_observed(mut self, masks: Vec<Vec<bool>>) -> Result<Dataset> {
        if masks.len() != self.individuals.len() {
            return Err(Error::InvalidInput("mask count differs from individual count".into()));
        }
        for (ind, m) in self.individuals.iter_mut().zip(masks) {
            if m.len() != ind.n_obs() {
                return Err(Error::InvalidInput("mask length differs from observation count".into()));
            }
            ind.observed = m;
        }
        Ok(self)
    }

    /// Reorders individuals; covariate rows follow.
    pub fn permute_individuals(&self, order: &[usize]) -> Result<Dataset> {
        let individuals: Vec<Individual> = order.iter().map(|&i| self.individuals[i].clone()).collect();
        let covariates = match self.level {
            CovariateLevel::Individual => self.covariates.select_rows(order),
            CovariateLevel::Observation => {
                let rows: Vec<usize> = order
                    .iter()
                    .flat_map(|&i| {
                        let start = self.row_offsets[i];
                        start..start + self.individuals[i].n_obs()
                    })
                    .collect();
                self.covariates.select_rows(&rows)
            }
        };
        Dataset::new(individuals, covariates, self.level, self.constant_names.clone())
    }
}
