//! Experiment configuration: one flat TOML-friendly struct that expands
//! into the per-module configs at run time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, AggregationRule};
use crate::chain::{ChainError, ElectionPolicy};
use crate::client::{ClientConfig, ClientError};
use crate::dataset::{
    default_universe, DataError, DeviceAssignment, GeneratorConfig, LabelSkew, StreamId,
    NUM_CLASSES,
};
use crate::forest::{ForestConfig, ForestError};
use crate::nn::{NnError, TrainConfig};
use crate::streams::StreamError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error("federation stalled after {ticks} ticks; client phases: {phases}")]
    Stalled { ticks: u64, phases: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Sampled,
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Hashed,
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SampleWeighted,
    Unweighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Fixed per-stream offsets and scales from the profile table; every
    /// node applies the same map, so pooled evaluation is uniform.
    Reference,
    /// Per-node z-scoring from local training statistics.
    TrainStats,
}

/// Everything a run needs, with defaults sized so the whole pipeline
/// finishes in seconds. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub patients: usize,
    /// Stream names; empty means the built-in six-stream universe.
    pub universe: Vec<String>,
    pub assignment: Assignment,
    /// Nested assignment gives each patient a prefix of the universe, so
    /// device sets form a chain and cohorts overlap heavily.
    pub nested_devices: bool,
    /// `device_count_weights[k-1]` weights owning `k` devices; empty
    /// means uniform over all counts.
    pub device_count_weights: Vec<f64>,
    pub samples_per_patient: usize,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub calibration_fraction: f64,
    /// When nonzero, node `i` only observes a window of this many
    /// consecutive classes (wrapping), shifted by `class_stride` per node.
    pub classes_per_node: usize,
    pub class_stride: usize,
    pub rounds: u64,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub trees: usize,
    pub tree_depth: usize,
    /// Smallest leaf the forest may grow. Size-one leaves degrade the
    /// meta-learner to nearest-neighbor behavior around class boundaries,
    /// so experiments default to a small neighborhood instead.
    pub min_leaf: usize,
    /// Fraction of table columns each split may consider. Raw feature
    /// columns offer far more cut points than the quantized prediction
    /// columns and win ties in-sample, so a smaller bag keeps the trees
    /// from drowning out the model predictions.
    pub feature_bag_fraction: f64,
    pub forest_train_fraction: f64,
    pub election_policy: Policy,
    pub aggregation: Aggregation,
    /// Client indices crashed right after the first election. Elected
    /// aggregators are never crashed; the run logs a warning instead.
    pub dropout_clients: Vec<usize>,
    pub normalization: Normalization,
    /// Scheduler budget; exceeding it is a liveness failure.
    pub max_ticks: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            patients: 20,
            universe: Vec::new(),
            assignment: Assignment::Sampled,
            nested_devices: false,
            device_count_weights: Vec::new(),
            samples_per_patient: 160,
            noise_sigma: 0.35,
            train_fraction: 0.6,
            calibration_fraction: 0.25,
            classes_per_node: 0,
            class_stride: 3,
            rounds: 3,
            hidden: vec![32, 16],
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 0.25,
            trees: 32,
            tree_depth: 12,
            min_leaf: 4,
            feature_bag_fraction: 0.5,
            forest_train_fraction: 0.7,
            election_policy: Policy::Hashed,
            aggregation: Aggregation::SampleWeighted,
            dropout_clients: Vec::new(),
            normalization: Normalization::Reference,
            max_ticks: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Invalid(m));
        if self.patients == 0 {
            return fail("patients must be >= 1".into());
        }
        let universe = self.universe_streams()?;
        if !self.device_count_weights.is_empty()
            && self.device_count_weights.len() > universe.len()
        {
            return fail(format!(
                "{} device count weights for a universe of {}",
                self.device_count_weights.len(),
                universe.len()
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if !(self.calibration_fraction > 0.0
            && self.train_fraction + self.calibration_fraction < 1.0)
        {
            return fail(format!(
                "train_fraction {} + calibration_fraction {} must leave room for a test split",
                self.train_fraction, self.calibration_fraction
            ));
        }
        let (n_train, n_cal, n_test) = self.split_counts();
        if n_train < 4 || n_cal < 2 || n_test < 1 {
            return fail(format!(
                "samples_per_patient {} splits into train={n_train} calibration={n_cal} \
                 test={n_test}; need at least 4/2/1",
                self.samples_per_patient
            ));
        }
        if self.classes_per_node > NUM_CLASSES {
            return fail(format!(
                "classes_per_node {} exceeds the {NUM_CLASSES} label classes",
                self.classes_per_node
            ));
        }
        if self.classes_per_node > 0 && self.class_stride == 0 {
            return fail("class_stride must be >= 1 when classes are windowed".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.max_ticks == 0 {
            return fail("max_ticks must be >= 1".into());
        }
        if !(self.forest_train_fraction > 0.0 && self.forest_train_fraction < 1.0) {
            return fail(format!(
                "forest_train_fraction {} outside (0, 1)",
                self.forest_train_fraction
            ));
        }
        for &idx in &self.dropout_clients {
            if idx >= self.patients {
                return fail(format!(
                    "dropout client index {idx} out of range for {} patients",
                    self.patients
                ));
            }
        }
        // Delegate numeric training and forest knobs to their owners.
        self.train_config().validate()?;
        self.forest_config().validate()?;
        self.generator()?.validate()?;
        Ok(())
    }

    /// Train, calibration, and test record counts per patient.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.samples_per_patient;
        let n_train = ((n as f64 * self.train_fraction) + 0.5).floor() as usize;
        let rest = n - n_train.min(n);
        let cal_share = self.calibration_fraction / (1.0 - self.train_fraction);
        let n_cal = ((rest as f64 * cal_share) + 0.5).floor() as usize;
        let n_cal = n_cal.min(rest);
        (n_train.min(n), n_cal, rest - n_cal)
    }

    pub fn universe_streams(&self) -> Result<Vec<StreamId>, HarnessError> {
        if self.universe.is_empty() {
            return Ok(default_universe());
        }
        self.universe
            .iter()
            .map(|name| StreamId::new(name).map_err(HarnessError::from))
            .collect()
    }

    pub fn generator(&self) -> Result<GeneratorConfig, HarnessError> {
        let universe = self.universe_streams()?;
        let weights = if self.device_count_weights.is_empty() {
            vec![1.0 / universe.len() as f64; universe.len()]
        } else {
            self.device_count_weights.clone()
        };
        Ok(GeneratorConfig {
            universe,
            device_count_weights: weights,
            nested: self.nested_devices,
            assignment: match self.assignment {
                Assignment::Sampled => DeviceAssignment::Sampled,
                Assignment::RoundRobin => DeviceAssignment::RoundRobin,
            },
            samples_per_patient: self.samples_per_patient,
            skew: LabelSkew::uniform(),
            noise_sigma: self.noise_sigma,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ..TrainConfig::default()
        }
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.trees,
            max_depth: self.tree_depth,
            min_leaf: self.min_leaf,
            feature_bag_fraction: self.feature_bag_fraction,
            ..ForestConfig::default()
        }
    }

    pub fn election_policy(&self) -> ElectionPolicy {
        match self.election_policy {
            Policy::Hashed => ElectionPolicy::Hashed,
            Policy::RoundRobin => ElectionPolicy::RoundRobin,
        }
    }

    pub fn aggregation_rule(&self) -> AggregationRule {
        match self.aggregation {
            Aggregation::SampleWeighted => AggregationRule::SampleWeighted,
            Aggregation::Unweighted => AggregationRule::Unweighted,
        }
    }

    pub fn client_config(&self, model_seed_base: u64) -> ClientConfig {
        ClientConfig {
            hidden: self.hidden.clone(),
            train: self.train_config(),
            forest: self.forest_config(),
            forest_train_fraction: self.forest_train_fraction,
            federation_rounds: self.rounds,
            aggregation: self.aggregation_rule(),
            model_seed_base,
        }
    }

    /// The label window node `i` observes: `classes_per_node` consecutive
    /// classes starting at `i * class_stride`, wrapping past the top.
    pub fn class_window(&self, node: usize) -> Option<Vec<u8>> {
        if self.classes_per_node == 0 || self.classes_per_node >= NUM_CLASSES {
            return None;
        }
        let start = (node * self.class_stride) % NUM_CLASSES;
        let window: Vec<u8> = (0..self.classes_per_node)
            .map(|j| ((start + j) % NUM_CLASSES) as u8)
            .collect();
        Some(window)
    }
}
