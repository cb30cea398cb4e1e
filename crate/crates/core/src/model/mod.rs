//! Data model, parameters, structural models and complete-data densities.

mod data;
pub mod density;
mod models;
mod params;

pub use data::{CovariateLevel, Dataset, Individual};
pub use density::{
    complete_log_density, complete_log_density_grad, latent_log_posterior_unnorm, prior_mean_state, Evaluator,
};
pub use models::{
    mean_linear, mean_logistic, mean_pharma, BetaTarget, Frozen, InitialGuess, LinearModel, LogisticModel,
    ModelDefinition, ModelKind, PharmaModel, RestrictedModel, ToyModel, PHARMA_RATE_GAP,
};
pub use params::{LatentState, Layout, ParameterVector};
