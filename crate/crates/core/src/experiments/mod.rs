//! Simulation studies: scenario files, data generators, the two-step
//! comparison method, scores and the replicated study driver.

pub mod baseline;
pub mod metrics;
pub mod scenario;
pub mod simulate;
pub mod study;

pub use baseline::{lasso_cd, lasso_cv_1se, two_step, BaselineConfig, BaselineResult};
pub use metrics::{mee, mse, rrmse, SelectionScores};
pub use scenario::{BetaEntry, CovariateLaw, InitSpec, Method, Scenario, Truth};
pub use simulate::{censor, draw_covariates, simulate, standardize_columns, Simulated};
pub use study::{replicate_data, run_replicate, run_study, EstimateSummary, MethodSummary, ReplicateOutcome, StudyReport};
