//! Experiment configuration, orchestration and report persistence.

pub mod config;
pub mod experiments;
pub mod output;
pub mod run;
pub mod stats;

pub use config::{ExperimentConfig, GridPoint, RunConfig};
pub use experiments::{
    compare_paradigms, scaling_sweep, stability_experiment, user_level_sweep, Exec, StabilityReport, SweepOutcome,
    UserSweepOutcome,
};
pub use run::{execute_run, risk_decomposition, ReferenceKind, RiskReport, RunReport};
