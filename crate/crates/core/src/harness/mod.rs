//! Experiment orchestration: population construction, the federation
//! scheduler, pooled evaluation, ledger audits, and the node sweep.

mod config;
mod experiment;
mod metrics;
mod sweep;

pub use config::{
    Aggregation, Assignment, ExperimentConfig, HarnessError, Normalization, Policy,
};
pub use experiment::{
    build_population, run_baseline, run_experiment, BaselineReport, ExperimentOutput, PatientData,
};
pub use metrics::MetricsReport;
pub use sweep::{node_sweep, SweepPoint, SweepReport};
