//! Simulation designs, error metrics and the Monte Carlo harness for tail
//! factor models.

pub mod dgp;
pub mod experiment;
pub mod metrics;

pub use dgp::{dgp3_lp, generate, reference_constant, symmetric_pareto_panel, DgpSample, DgpSpec};
pub use experiment::{format_csv, format_table, run_experiment, ExperimentConfig, ExperimentReport, LevelSpec, ModelKind, TailSettings};
pub use metrics::{align_and_score, msre, msre_eot, msre_surface, truth_at, TailTruth};
