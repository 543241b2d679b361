//! Metrics, experiment plans and the experiment matrix.

pub mod matrix;
pub mod metrics;
pub mod plan;

pub use matrix::{run_experiment_matrix, Cell, ExperimentReport, MatrixContext, MatrixOutput, MatrixReport};
pub use plan::{AlphaGrid, Checkpoints, CorpusConfig, DataSpec, ExperimentPlan, LambdaScale, Method};
