//! Posterior-collapse measurement and task metrics.

pub mod collapse;
pub mod metrics;

pub use collapse::{
    collapse_curve, collapse_fraction, collapse_report, default_epsilon_grid, per_dim_kl_matrix, variance_collapse,
    CollapseConfig, CollapseReport, Pairing,
};
pub use metrics::{
    error_rate, evaluate, mean_average_precision, predict_classes, rmse, MapResult, MetricsReport,
};
