//! Experiment driver for manipulative attack planning: game batches over
//! covariance values, the assumed/actual model matrix with its equilibrium
//! baseline, and CSV reports.

pub mod experiment;
pub mod report;
pub mod scenario;

pub use experiment::{run_matrix, ExperimentConfig, ResultsTable, RunRecord};
pub use scenario::ScenarioSpec;
