//! Target-task adaptation: sparse linear models on extracted features,
//! relevance scores, and regularised fine-tuning.

pub mod finetune;
pub mod linear;
pub mod relevance;

pub use linear::{
    data_loss, kkt_residual, lasso_regression, penalty_grid, train_l1_logreg, train_lasso, tune_penalty, FeatureLayout,
    FeatureScaling, GridPoint, LossKind, SolverConfig, SparseLinearModel,
};
pub use relevance::{relevance, RelevanceReport};
pub use finetune::{finetune, penalty_grad, penalty_value, FinetuneConfig, FinetunedModel, RegKind, StepGradients};
