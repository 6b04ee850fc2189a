//! Oracle-based evaluation and the ablation drivers.

pub mod ablation;
pub mod metrics;

pub use metrics::{diversity, extrapolation_rate, threshold_fractions, Direction, Diversity, Evaluator, MetricsReport};
