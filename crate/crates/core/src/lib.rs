//! Deterministic simulation library for privacy-preserving federated
//! prediction of affect scores from heterogeneous physiological streams.

pub mod aggregate;
pub mod chain;
pub mod client;
pub mod dataset;
pub mod forest;
pub mod harness;
pub mod hashing;
pub mod nn;
pub mod streams;

pub use aggregate::{fed_average, AggregationRule, WeightedParams};
pub use chain::{Address, Contract, LedgerEntry, LedgerKind};
pub use client::{ClientConfig, ClientState, Phase};
pub use forest::ForestModel;
pub use harness::{ExperimentConfig, MetricsReport};
pub use dataset::{PatientDataset, SampleRecord, StreamId};
pub use nn::{ModelParams, NetShape, TrainConfig};
pub use streams::{power_set, StreamSubset};
