//! Scenario files: a model preset overridden by a TOML document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelDefinition, ModelKind, ParameterVector};
use crate::optimizer::{default_theta0, AwpsgConfig, StepScale};
use crate::oracle::ToyModelSpec;
use crate::regpath::{GridConfig, PathConfig, Sweep};
use crate::sampler::SamplerConfig;

use super::baseline::BaselineConfig;

/// One nonzero regression coefficient, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Generating parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    #[serde(default)]
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma_sq: Vec<f64>,
    pub sigma_sq: f64,
    pub beta: Vec<BetaEntry>,
}

/// Starting values for the fits; any field left out falls back to the
/// model's moment-based guess.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub alpha: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub gamma_sq: Option<Vec<f64>>,
    pub sigma_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovariateLaw {
    Uniform { low: f64, high: f64 },
    /// Bernoulli draws, optionally standardized column by column.
    Bernoulli { p: f64, standardize: bool },
    /// Observation-level orthonormal, per-individual centred design.
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Penalized likelihood path with eBIC selection and refit.
    Integrated,
    /// Per-individual nonlinear least squares followed by a linear LASSO.
    TwoStep,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Integrated => "integrated",
            Method::TwoStep => "two_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelKind,
    pub n_individuals: usize,
    pub n_covariates: usize,
    /// Observation times shared by all individuals.
    pub times: Vec<f64>,
    pub truth: Truth,
    pub covariates: CovariateLaw,
    /// Per-individual constants shared by everyone (dose, volume).
    pub constants: BTreeMap<String, f64>,
    pub censoring_rate: f64,
    /// Censored individuals keep only this many leading observations.
    pub censored_times: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub init: InitSpec,
    pub path: PathConfig,
    pub baseline: BaselineConfig,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|t| a + (b - a) * t as f64 / (n - 1) as f64).collect()
}

fn entries(row: usize, cols_values: &[(usize, f64)]) -> Vec<BetaEntry> {
    cols_values
        .iter()
        .map(|&(col, value)| BetaEntry { row, col, value })
        .collect()
}

impl Scenario {
    /// Desk-scale defaults for each model.
    pub fn preset(model: ModelKind) -> Scenario {
        let base_path = PathConfig::default();
        match model {
            ModelKind::Linear => Scenario {
                name: "lmem".into(),
                model,
                n_individuals: 100,
                n_covariates: 200,
                times: linspace(0.0, 1.0, 10),
                truth: Truth {
                    alpha: vec![],
                    mu: vec![2.0, 5.0],
                    gamma_sq: vec![1.0, 4.0],
                    sigma_sq: 1.0,
                    beta: entries(1, &[(1, 8.0), (2, -10.0), (3, 20.0)]),
                },
                covariates: CovariateLaw::Uniform { low: -1.0, high: 1.0 },
                constants: BTreeMap::new(),
                censoring_rate: 0.0,
                censored_times: 3,
                n_runs: 20,
                seed: 20240101,
                methods: vec![Method::Integrated],
                init: InitSpec::default(),
                path: PathConfig {
                    penalized: AwpsgConfig {
                        k_max: 1500,
                        ..AwpsgConfig::default()
                    },
                    refit: AwpsgConfig {
                        k_max: 2000,
                        ..AwpsgConfig::default()
                    },
                    mc_draws: 2000,
                    grid: GridConfig {
                        n_points: 20,
                        ratio: 0.1,
                        ..GridConfig::default()
                    },
                    max_support: Some(20),
                    sweep: Sweep::Ascending,
                    ..base_path
                },
                baseline: BaselineConfig::default(),
            },
            ModelKind::Logistic => Scenario {
                name: "logistic".into(),
                model,
                n_individuals: 200,
                n_covariates: 200,
                times: linspace(150.0, 3000.0, 15),
                truth: Truth {
                    alpha: vec![300.0],
                    mu: vec![200.0, 1200.0],
                    gamma_sq: vec![49.0, 900.0],
                    sigma_sq: 30.0,
                    beta: entries(1, &[(1, 100.0), (2, 200.0), (3, -300.0)]),
                },
                covariates: CovariateLaw::Uniform { low: -1.0, high: 1.0 },
                constants: BTreeMap::new(),
                censoring_rate: 0.0,
                censored_times: 3,
                n_runs: 10,
                seed: 20240202,
                methods: vec![Method::Integrated],
                init: InitSpec::default(),
                path: PathConfig {
                    penalized: AwpsgConfig {
                        k_max: 1500,
                        step_scale: StepScale {
                            alpha: vec![20.0],
                            latent: vec![5.0, 50.0],
                            ..StepScale::default()
                        },
                        ..AwpsgConfig::default()
                    },
                    refit: AwpsgConfig {
                        k_max: 2000,
                        step_scale: StepScale {
                            alpha: vec![20.0],
                            latent: vec![5.0, 50.0],
                            ..StepScale::default()
                        },
                        ..AwpsgConfig::default()
                    },
                    mc_draws: 2000,
                    grid: GridConfig {
                        n_points: 20,
                        ratio: 0.1,
                        ..GridConfig::default()
                    },
                    max_support: Some(20),
                    sweep: Sweep::Ascending,
                    ..base_path
                },
                baseline: BaselineConfig::default(),
            },
            ModelKind::Pharma => {
                let mut constants = BTreeMap::new();
                constants.insert("dose".to_string(), 10.0);
                constants.insert("volume".to_string(), 100.0);
                Scenario {
                    name: "pharma".into(),
                    model,
                    n_individuals: 200,
                    n_covariates: 500,
                    times: vec![0.05, 0.15, 0.25, 0.4, 0.5, 0.8, 1.0, 2.0, 7.0, 12.0, 24.0, 40.0],
                    truth: Truth {
                        alpha: vec![],
                        mu: vec![6.0, 8.0],
                        gamma_sq: vec![0.04, 0.01],
                        sigma_sq: 1e-6,
                        beta: [entries(1, &[(1, 3.0), (2, 2.0), (3, 1.0)]), entries(2, &[(3, 3.0), (4, 2.0), (5, 1.0)])]
                            .concat(),
                    },
                    covariates: CovariateLaw::Bernoulli {
                        p: 0.2,
                        standardize: true,
                    },
                    constants,
                    censoring_rate: 0.0,
                    censored_times: 3,
                    n_runs: 10,
                    seed: 20240303,
                    methods: vec![Method::Integrated, Method::TwoStep],
                    init: InitSpec {
                        alpha: None,
                        mu: Some(vec![5.0, 10.0]),
                        gamma_sq: Some(vec![1.0, 1.0]),
                        sigma_sq: Some(1e-4),
                    },
                    path: PathConfig {
                        penalized: AwpsgConfig {
                            k_max: 1000,
                            ..AwpsgConfig::default()
                        },
                        refit: AwpsgConfig {
                            k_max: 1500,
                            ..AwpsgConfig::default()
                        },
                        sampler: SamplerConfig {
                            adapt_window: 10,
                            ..SamplerConfig::default()
                        },
                        mc_draws: 2000,
                        grid: GridConfig {
                            n_points: 20,
                            ratio: 0.1,
                            ..GridConfig::default()
                        },
                        max_support: Some(30),
                        sweep: Sweep::Ascending,
                        ..base_path
                    },
                    baseline: BaselineConfig::default(),
                }
            }
            ModelKind::Toy => Scenario {
                name: "toy".into(),
                model,
                n_individuals: 100,
                n_covariates: 200,
                times: (0..5).map(|t| t as f64).collect(),
                truth: Truth {
                    alpha: vec![],
                    mu: vec![0.0],
                    gamma_sq: vec![16.0],
                    sigma_sq: 4.0,
                    beta: entries(1, &[(1, 4.0), (2, -3.0)]),
                },
                covariates: CovariateLaw::Orthogonal,
                constants: BTreeMap::new(),
                censoring_rate: 0.0,
                censored_times: 3,
                n_runs: 5,
                seed: 20240404,
                methods: vec![Method::Integrated],
                init: InitSpec::default(),
                path: PathConfig {
                    penalized: AwpsgConfig {
                        convergence_tol: 1e-6,
                        ..AwpsgConfig::default()
                    },
                    refit: AwpsgConfig {
                        convergence_tol: 1e-6,
                        ..AwpsgConfig::default()
                    },
                    mc_draws: 2000,
                    grid: GridConfig {
                        n_points: 20,
                        ratio: 1e-2,
                        ..GridConfig::default()
                    },
                    max_support: Some(40),
                    ..base_path
                },
                baseline: BaselineConfig::default(),
            },
        }
    }

    /// Parses a TOML scenario: the `model` key selects a preset and every
    /// other key overrides it (tables merge recursively).
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let kind: ModelKind = match user.get("model").and_then(|v| v.as_str()) {
            Some(s) => s.parse()?,
            None => return Err(Error::Config("scenario must set `model`".into())),
        };
        let preset = toml::Table::try_from(Scenario::preset(kind)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = preset;
        let mut user = user;
        user.remove("model");
        merge(&mut merged, user);
        let scenario: Scenario = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.build();
        let q = model.latent_dim();
        let rows = model.beta_targets().len();
        if !(0.0..=1.0).contains(&self.censoring_rate) {
            return Err(Error::Config("censoring_rate must lie in [0, 1]".into()));
        }
        if self.n_individuals == 0 || self.n_covariates == 0 || self.times.is_empty() || self.n_runs == 0 {
            return Err(Error::Config("n_individuals, n_covariates, times and n_runs must be nonempty".into()));
        }
        if self.truth.mu.len() != q || self.truth.gamma_sq.len() != q || self.truth.alpha.len() != model.fixed_dim() {
            return Err(Error::Config(format!(
                "truth for `{}` needs {} alpha, {q} mu and {q} gamma_sq values",
                model.name(),
                model.fixed_dim()
            )));
        }
        for e in &self.truth.beta {
            if e.row == 0 || e.row > rows || e.col == 0 || e.col > self.n_covariates {
                return Err(Error::Config(format!("beta entry ({}, {}) out of range", e.row, e.col)));
            }
        }
        for name in model.constant_names() {
            if !self.constants.contains_key(*name) {
                return Err(Error::Config(format!("constant `{name}` missing")));
            }
        }
        if self.censored_times == 0 {
            return Err(Error::Config("censored_times must be positive".into()));
        }
        if self.model == ModelKind::Toy {
            if self.covariates != CovariateLaw::Orthogonal {
                return Err(Error::Config("toy scenarios use the orthogonal covariate law".into()));
            }
            if self.methods.contains(&Method::TwoStep) {
                return Err(Error::Config("the two-step baseline is not defined for the toy model".into()));
            }
        } else if self.covariates == CovariateLaw::Orthogonal {
            return Err(Error::Config("the orthogonal covariate law is reserved for the toy model".into()));
        }
        self.path.penalized.validate()?;
        self.path.refit.validate()?;
        self.path.sampler.validate()?;
        Ok(())
    }

    /// True parameter in the flat-layout form.
    pub fn true_theta(&self) -> Result<ParameterVector> {
        let model = self.model.build();
        let rows = model.beta_targets().len();
        let mut theta = ParameterVector::with_zero_beta(
            self.truth.alpha.clone(),
            self.truth.mu.clone(),
            rows,
            self.n_covariates,
            self.truth.gamma_sq.clone(),
            self.truth.sigma_sq,
        )?;
        for e in &self.truth.beta {
            theta.beta[(e.row - 1, e.col - 1)] = e.value;
        }
        Ok(theta)
    }

    /// Row-major flat indices of the true nonzero coefficients.
    pub fn true_support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .truth
            .beta
            .iter()
            .filter(|e| e.value != 0.0)
            .map(|e| (e.row - 1) * self.n_covariates + e.col - 1)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Dimensions and truth of a toy scenario.
    pub fn toy_spec(&self) -> Result<ToyModelSpec> {
        if self.model != ModelKind::Toy {
            return Err(Error::Config(format!("scenario `{}` is not a toy scenario", self.name)));
        }
        let width = self.truth.beta.iter().map(|e| e.col).max().unwrap_or(0);
        let mut beta_true = vec![0.0; width];
        for e in &self.truth.beta {
            beta_true[e.col - 1] = e.value;
        }
        let spec = ToyModelSpec {
            n: self.n_individuals,
            j: self.times.len(),
            p: self.n_covariates,
            gamma_sq: self.truth.gamma_sq[0],
            sigma_sq: self.truth.sigma_sq,
            beta_true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Starting parameter for fits on `data`.
    pub fn theta0(&self, model: &dyn ModelDefinition, data: &Dataset) -> Result<ParameterVector> {
        if self.model == ModelKind::Toy {
            // Known variances and zero latent mean.
            return ParameterVector::with_zero_beta(
                vec![],
                vec![0.0],
                1,
                data.n_covariates(),
                self.truth.gamma_sq.clone(),
                self.truth.sigma_sq,
            );
        }
        let has_all = self.init.mu.is_some()
            && self.init.gamma_sq.is_some()
            && self.init.sigma_sq.is_some()
            && (self.init.alpha.is_some() || model.fixed_dim() == 0);
        let base = if has_all {
            None
        } else {
            Some(default_theta0(model, data)?)
        };
        let pick = |own: &Option<Vec<f64>>, fallback: Option<Vec<f64>>| -> Vec<f64> {
            own.clone().or(fallback).unwrap_or_default()
        };
        let alpha = pick(&self.init.alpha, base.as_ref().map(|b| b.alpha.clone()));
        let mu = pick(&self.init.mu, base.as_ref().map(|b| b.mu.clone()));
        let gamma_sq = pick(&self.init.gamma_sq, base.as_ref().map(|b| b.gamma_sq_vec()));
        let sigma_sq = self
            .init
            .sigma_sq
            .or(base.as_ref().map(|b| b.sigma_sq()))
            .unwrap_or(1.0);
        ParameterVector::with_zero_beta(
            alpha,
            mu,
            model.beta_targets().len(),
            data.n_covariates(),
            gamma_sq,
            sigma_sq,
        )
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_roundtrip() {
        for kind in [ModelKind::Linear, ModelKind::Logistic, ModelKind::Pharma, ModelKind::Toy] {
            let s = Scenario::preset(kind);
            s.validate().unwrap();
            let text = s.to_toml_string().unwrap();
            let back = Scenario::from_toml_str(&text).unwrap();
            assert_eq!(back, s, "{kind:?}");
        }
    }

    #[test]
    fn overrides_merge_into_preset() {
        let s = Scenario::from_toml_str(
            "model = \"pharma\"\ncensoring_rate = 0.4\nn_runs = 3\n[path.grid]\nn_points = 7\n",
        )
        .unwrap();
        assert_eq!(s.censoring_rate, 0.4);
        assert_eq!(s.n_runs, 3);
        assert_eq!(s.path.grid.n_points, 7);
        let preset = Scenario::preset(ModelKind::Pharma);
        assert_eq!(s.path.grid.ratio, preset.path.grid.ratio);
        assert_eq!(s.path.grid.lambda_max, preset.path.grid.lambda_max);
        assert_eq!(s.n_covariates, preset.n_covariates);
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert!(Scenario::from_toml_str("n_runs = 3").is_err());
        assert!(Scenario::from_toml_str("model = \"linear\"\ncensoring_rate = 1.5").is_err());
        assert!(Scenario::from_toml_str("model = \"linear\"\nunknown_key = 1").is_err());
        assert!(Scenario::from_toml_str("model = \"linear\"\n[truth]\nmu = [1.0]").is_err());
    }

    #[test]
    fn true_support_is_flat_row_major() {
        let s = Scenario::preset(ModelKind::Pharma);
        assert_eq!(s.true_support(), vec![0, 1, 2, 502, 503, 504]);
    }
}
