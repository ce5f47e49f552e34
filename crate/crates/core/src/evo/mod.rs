//! Evolution-strategies search over mixed-scale variables with a Tabu
//! history and warm-started evaluations.

mod es;
mod history;
mod space;

pub use es::{
    estimate_gradient, gradient_between, min_pairwise_distance, mutate, recombine, run_search, select_population,
    EsConfig, EvalOutcome, EvalRequest, Evaluator, FnEvaluator, SearchOutcome, TABU_DRAWS, TABU_EXPANSIONS,
};
pub use history::{Budget, EvalMetrics, History, RunRecord};
pub use space::{SearchSpace, Value, VarKind, Variable};

pub use crate::weighting::normalize_weights;
