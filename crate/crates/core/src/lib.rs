//! Variable selection and parameter estimation in (non)linear mixed-effects
//! models with high-dimensional covariates.
//!
//! The pipeline is:
//!
//! 1. [`optimizer::awpsg_fit`] computes the ℓ1-penalized maximum likelihood
//!    estimate with an adaptive weighted proximal stochastic gradient
//!    (latent simulation, AdaGrad forward step, weighted soft-threshold
//!    backward step on `beta`).
//! 2. [`regpath::run_path`] sweeps a log-spaced grid of penalty levels,
//!    refits each distinct support by maximum likelihood and picks the level
//!    minimizing the extended BIC.
//! 3. [`oracle`] provides an exactly solvable linear toy model used to
//!    validate the optimizer, and [`experiments`] drives simulation studies.

pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod regpath;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use model::{
    BetaTarget, CovariateLevel, Dataset, Individual, LatentState, Layout, ModelDefinition,
    ModelKind, ParameterVector,
};
pub use optimizer::{asgd_fit, awpsg_fit, prox_weighted_l1, AwpsgConfig, FitResult};
pub use regpath::{run_path, PathConfig, PathRecord, PathResult, Sweep};
pub use sampler::SamplerConfig;
