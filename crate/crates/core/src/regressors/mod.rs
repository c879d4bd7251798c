//! Learners behind the propensity and imputation models: binary and
//! multinomial logistic regression, and bagged classification trees.

mod glm;
mod trees;

pub use glm::{
    draw_coefficients, fit_logistic, fit_multinomial, logistic_loglik, logistic_score, multinomial_loglik,
    multinomial_score, GlmError, GlmFit, GLM_MAX_ITERATIONS,
};
pub use trees::{draw_class, fit_trees, ClassificationTree, Node, TreeEnsemble, TreeError, TreeParams};
