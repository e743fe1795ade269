//! Per-node lifecycle: collect, train per subset, federate through the
//! contract, calibrate the forest, serve predictions.
//!
//! A client is a polling state machine; the harness calls [`ClientState::step`]
//! until every node is `Ready`. Within a federation round the client
//! trains one model per owned stream subset (continuing from the
//! previous round's aggregates), registers, submits, aggregates the
//! subsets it was elected for, and waits until an averaged model has
//! arrived for every owned subset. Contract rejections are logged and
//! leave the client unchanged; they never tear it down.
//!
//! Cohort members share per-subset initialization seeds derived from the
//! experiment seed. Averaging parameters of networks that started from
//! unrelated initializations mangles them (hidden units do not line up),
//! so the shared starting point is what makes round one's averages
//! meaningful.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::aggregate::{fed_average_with, AggregateError, AggregationRule, WeightedParams};
use crate::chain::{Address, ChainError, Contract, Delivery};
use crate::dataset::{DataError, Normalizer, PatientDataset, SampleRecord, StreamId};
use crate::forest::{
    build_calibration, train_forest, CalibrationTable, ForestConfig, ForestError, ForestModel,
};
use crate::hashing::derive_seed;
use crate::nn::{init_params, train_from, ModelParams, NetShape, NnError, Row, TrainConfig};
use crate::streams::{power_set, StreamError, StreamSubset};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client is {0}, not Ready")]
    NotReady(Phase),
    #[error("prediction input is missing owned stream {0}")]
    MissingStream(StreamId),
    #[error("training data is empty")]
    EmptyTrainingData,
    #[error("need at least 2 calibration records, got {0}")]
    NotEnoughCalibration(usize),
    #[error("illegal phase transition {from} -> {to}")]
    IllegalTransition { from: Phase, to: Phase },
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
}

/// Client lifecycle phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Collecting,
    Training,
    AwaitingElection,
    Aggregating,
    Calibrating,
    Ready,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Collecting => "Collecting",
            Phase::Training => "Training",
            Phase::AwaitingElection => "AwaitingElection",
            Phase::Aggregating => "Aggregating",
            Phase::Calibrating => "Calibrating",
            Phase::Ready => "Ready",
        };
        f.write_str(name)
    }
}

/// The declared transition relation. Waiting states may self-loop;
/// `Training` re-entry happens at round boundaries.
pub fn transition_allowed(from: Phase, to: Phase) -> bool {
    use Phase::*;
    matches!(
        (from, to),
        (Collecting, Training)
            | (Training, AwaitingElection)
            | (AwaitingElection, AwaitingElection)
            | (AwaitingElection, Aggregating)
            | (AwaitingElection, Training)
            | (AwaitingElection, Calibrating)
            | (Aggregating, Aggregating)
            | (Aggregating, Training)
            | (Aggregating, Calibrating)
            | (Calibrating, Ready)
            | (Ready, Ready)
    )
}

/// Per-client settings. `model_seed_base` must be shared by every
/// client in an experiment; per-subset initialization seeds derive from
/// it so cohort members start from identical parameters.
#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub forest_train_fraction: f64,
    pub federation_rounds: u64,
    pub aggregation: AggregationRule,
    pub model_seed_base: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            hidden: vec![64, 32],
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            forest_train_fraction: 0.7,
            federation_rounds: 1,
            aggregation: AggregationRule::SampleWeighted,
            model_seed_base: 0,
        }
    }
}

/// One observable step of the client state machine.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub address: Address,
    pub from: Phase,
    pub to: Phase,
    pub action: String,
}

pub struct ClientState {
    address: Address,
    cfg: ClientConfig,
    /// Normalized training split.
    dataset: PatientDataset,
    /// Normalized calibration window, held out from training entirely.
    calibration: Vec<SampleRecord>,
    normalizer: Normalizer,
    phase: Phase,
    rounds_done: u64,
    subsets: Vec<StreamSubset>,
    features: BTreeMap<StreamSubset, Vec<Row>>,
    model_store: BTreeMap<StreamSubset, ModelParams>,
    submitted: bool,
    received: BTreeSet<StreamSubset>,
    inbox: BTreeMap<StreamSubset, Vec<(Address, WeightedParams)>>,
    broadcasts_done: BTreeSet<StreamSubset>,
    calib_table: Option<CalibrationTable>,
    calib_fit_count: usize,
    forest: Option<ForestModel>,
    warnings: Vec<String>,
    client_seed: u64,
}

impl ClientState {
    /// `dataset` is the normalized training split; `calibration` the
    /// normalized held-out window the forest will be fit on.
    pub fn new(
        address: Address,
        dataset: PatientDataset,
        calibration: Vec<SampleRecord>,
        normalizer: Normalizer,
        cfg: ClientConfig,
    ) -> Result<Self, ClientError> {
        if dataset.is_empty() {
            return Err(ClientError::EmptyTrainingData);
        }
        dataset.validate()?;
        if calibration.len() < 2 {
            return Err(ClientError::NotEnoughCalibration(calibration.len()));
        }
        let width = dataset.streams.len();
        for rec in &calibration {
            if rec.values.len() != width {
                return Err(ClientError::Data(DataError::InvalidRecord {
                    index: 0,
                    message: format!(
                        "calibration record has {} values for {width} streams",
                        rec.values.len()
                    ),
                }));
            }
        }
        let subsets = power_set(&dataset.streams);
        let client_seed = derive_seed(cfg.model_seed_base, address.as_str(), 0);
        Ok(ClientState {
            address,
            cfg,
            dataset,
            calibration,
            normalizer,
            phase: Phase::Collecting,
            rounds_done: 0,
            subsets,
            features: BTreeMap::new(),
            model_store: BTreeMap::new(),
            submitted: false,
            received: BTreeSet::new(),
            inbox: BTreeMap::new(),
            broadcasts_done: BTreeSet::new(),
            calib_table: None,
            calib_fit_count: 0,
            forest: None,
            warnings: Vec::new(),
            client_seed,
        })
    }

    pub fn address(&self) -> &Address {
        &self.address
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_ready(&self) -> bool {
        self.phase == Phase::Ready
    }

    pub fn streams(&self) -> &StreamSubset {
        &self.dataset.streams
    }

    pub fn subsets(&self) -> &[StreamSubset] {
        &self.subsets
    }

    pub fn rounds_done(&self) -> u64 {
        self.rounds_done
    }

    pub fn n_train_samples(&self) -> usize {
        self.dataset.len()
    }

    /// Current per-subset models: local parameters during a round,
    /// cohort aggregates once federation has delivered them.
    pub fn models(&self) -> &BTreeMap<StreamSubset, ModelParams> {
        &self.model_store
    }

    pub fn forest(&self) -> Option<&ForestModel> {
        self.forest.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn calibration_table(&self) -> Option<&CalibrationTable> {
        self.calib_table.as_ref()
    }

    /// Calibration rows not used to fit the forest.
    pub fn holdout_rows(&self) -> &[crate::forest::CalibrationRow] {
        match &self.calib_table {
            Some(t) => &t.rows[self.calib_fit_count..],
            None => &[],
        }
    }

    /// Forest accuracy on the calibration holdout.
    pub fn holdout_forest_accuracy(&self) -> Option<f64> {
        let forest = self.forest.as_ref()?;
        let rows = self.holdout_rows();
        if rows.is_empty() {
            return None;
        }
        let hits = rows
            .iter()
            .filter(|r| forest.predict_row(&r.x).expect("schema matches") == r.label)
            .count();
        Some(hits as f64 / rows.len() as f64)
    }

    /// Per-subset model accuracy on the same holdout rows, read straight
    /// from the prediction columns of the calibration table.
    pub fn holdout_model_accuracies(&self) -> BTreeMap<StreamSubset, f64> {
        let mut out = BTreeMap::new();
        let table = match &self.calib_table {
            Some(t) => t,
            None => return out,
        };
        let rows = self.holdout_rows();
        if rows.is_empty() {
            return out;
        }
        for (col, key) in table.schema.iter().enumerate() {
            if let crate::forest::ColumnKey::ModelPred(subset) = key {
                let hits = rows.iter().filter(|r| r.x[col] == r.label as f64).count();
                out.insert(subset.clone(), hits as f64 / rows.len() as f64);
            }
        }
        out
    }

    fn transition(&mut self, to: Phase) -> Result<(), ClientError> {
        if !transition_allowed(self.phase, to) {
            return Err(ClientError::IllegalTransition { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    fn note(&mut self, context: &str, err: impl fmt::Display) {
        self.warnings.push(format!("{}: {context}: {err}", self.address));
    }

    /// Drains the contract mailbox into local state: contributions are
    /// buffered for aggregation duty, aggregates replace the stored
    /// models and count toward round completion.
    fn drain_deliveries(&mut self, contract: &mut Contract) {
        for d in contract.fetch_deliveries(&self.address) {
            match d {
                Delivery::Contribution { subset, from, contribution } => {
                    self.inbox.entry(subset).or_default().push((from, contribution));
                }
                Delivery::Aggregate { subset, params } => {
                    self.model_store.insert(subset.clone(), params);
                    self.received.insert(subset);
                }
            }
        }
    }

    /// Advances one step. Exactly one phase transition (possibly a
    /// self-loop) happens per call.
    pub fn step(&mut self, contract: &mut Contract) -> Result<StepTrace, ClientError> {
        let from = self.phase;
        let action = match self.phase {
            Phase::Collecting => self.step_collecting()?,
            Phase::Training => self.step_training(contract)?,
            Phase::AwaitingElection => self.step_awaiting(contract)?,
            Phase::Aggregating => self.step_aggregating(contract)?,
            Phase::Calibrating => self.step_calibrating()?,
            Phase::Ready => {
                self.transition(Phase::Ready)?;
                "idle".to_string()
            }
        };
        Ok(StepTrace { address: self.address.clone(), from, to: self.phase, action })
    }

    fn step_collecting(&mut self) -> Result<String, ClientError> {
        // Assemble the per-subset training matrices once; training
        // reuses them every round.
        for subset in &self.subsets {
            let cols: Vec<usize> = subset
                .members()
                .iter()
                .map(|m| self.dataset.streams.index_of(m).expect("power set member"))
                .collect();
            let rows: Vec<Row> = self
                .dataset
                .records
                .iter()
                .map(|r| (cols.iter().map(|&c| r.values[c]).collect(), r.label))
                .collect();
            self.features.insert(subset.clone(), rows);
        }
        self.transition(Phase::Training)?;
        Ok(format!(
            "assembled {} records into {} subset matrices",
            self.dataset.len(),
            self.subsets.len()
        ))
    }

    fn step_training(&mut self, contract: &mut Contract) -> Result<String, ClientError> {
        for subset in &self.subsets {
            let key = subset.key();
            let start = match self.model_store.get(subset) {
                // Later rounds continue from the cohort aggregate.
                Some(agg) => agg.clone(),
                None => {
                    let shape = NetShape::new(subset.len(), self.cfg.hidden.clone())?;
                    init_params(&shape, derive_seed(self.cfg.model_seed_base, &key, 0))
                }
            };
            let cfg = TrainConfig {
                seed: derive_seed(self.client_seed, &key, self.rounds_done),
                ..self.cfg.train.clone()
            };
            let rows = &self.features[subset];
            let (params, history) = train_from(start, rows, &cfg)?;
            for w in history.warnings {
                self.warnings.push(format!("{} [{key}]: {w}", self.address));
            }
            self.model_store.insert(subset.clone(), params);
        }
        if let Err(e) = contract.register_finished(&self.address, &self.subsets) {
            self.note("registration rejected", e);
        }
        self.transition(Phase::AwaitingElection)?;
        Ok(format!("trained {} subset models for round {}", self.subsets.len(), self.rounds_done))
    }

    fn step_awaiting(&mut self, contract: &mut Contract) -> Result<String, ClientError> {
        self.drain_deliveries(contract);
        // Round completion first: the final broadcast advances the
        // contract round and clears the election flag, so a client
        // gated on the election would otherwise wait forever.
        if self.subsets.iter().all(|s| self.received.contains(s)) {
            return self.finish_round_or_wait(Phase::AwaitingElection, Vec::new());
        }
        if !contract.election_done() {
            self.transition(Phase::AwaitingElection)?;
            return Ok("waiting for election".to_string());
        }
        let mut notes = Vec::new();
        if !self.submitted {
            let n = self.dataset.len() as u64;
            for subset in self.subsets.clone() {
                let params = self.model_store[&subset].clone();
                if let Err(e) = contract.submit_params(&self.address, &subset, params, n) {
                    self.note(&format!("submission for {subset} rejected"), e);
                }
            }
            self.submitted = true;
            notes.push(format!("submitted {} models", self.subsets.len()));
        }
        self.drain_deliveries(contract);
        let assignments = contract.assignments_for(&self.address);
        if !assignments.is_empty() {
            let keys: Vec<String> = assignments.iter().map(|s| s.key()).collect();
            notes.push(format!("elected aggregator for {}", keys.join(", ")));
            self.transition(Phase::Aggregating)?;
            return Ok(notes.join("; "));
        }
        Ok(self.finish_round_or_wait(Phase::AwaitingElection, notes)?)
    }

    fn step_aggregating(&mut self, contract: &mut Contract) -> Result<String, ClientError> {
        self.drain_deliveries(contract);
        let mut notes = Vec::new();
        for subset in contract.assignments_for(&self.address) {
            if self.broadcasts_done.contains(&subset) {
                continue;
            }
            let expected: BTreeSet<Address> =
                contract.expected_contributors(&subset).into_iter().collect();
            let have: BTreeSet<Address> = self
                .inbox
                .get(&subset)
                .map(|v| v.iter().map(|(a, _)| a.clone()).collect())
                .unwrap_or_default();
            if !expected.is_subset(&have) {
                continue; // contributions still outstanding
            }
            // Canonical fold order: contributor address. Includes any
            // contribution that made it to the ledger, which is exactly
            // what replay recomputes.
            let mut contribs = self.inbox.remove(&subset).unwrap_or_default();
            contribs.sort_by(|a, b| a.0.cmp(&b.0));
            let weighted: Vec<WeightedParams> = contribs.into_iter().map(|(_, w)| w).collect();
            let aggregate = fed_average_with(self.cfg.aggregation, &weighted)?;
            match contract.broadcast_aggregate(&self.address, &subset, aggregate) {
                Ok(()) => {
                    self.broadcasts_done.insert(subset.clone());
                    notes.push(format!("broadcast {} ({} contributions)", subset, weighted.len()));
                }
                Err(e) => self.note(&format!("broadcast for {subset} rejected"), e),
            }
        }
        self.drain_deliveries(contract);
        let pending = contract
            .assignments_for(&self.address)
            .iter()
            .filter(|s| !self.broadcasts_done.contains(s))
            .count();
        if pending > 0 {
            if notes.is_empty() {
                notes.push(format!("waiting for contributions on {pending} subsets"));
            }
            self.transition(Phase::Aggregating)?;
            return Ok(notes.join("; "));
        }
        Ok(self.finish_round_or_wait(Phase::Aggregating, notes)?)
    }

    /// Round bookkeeping shared by the two waiting phases: once an
    /// aggregate has arrived for every owned subset the round is over,
    /// and the client either trains again or moves on to calibration.
    fn finish_round_or_wait(
        &mut self,
        stay: Phase,
        mut notes: Vec<String>,
    ) -> Result<String, ClientError> {
        let complete = self.subsets.iter().all(|s| self.received.contains(s));
        if !complete {
            notes.push("waiting for aggregates".to_string());
            self.transition(stay)?;
            return Ok(notes.join("; "));
        }
        self.rounds_done += 1;
        self.submitted = false;
        self.received.clear();
        self.inbox.clear();
        self.broadcasts_done.clear();
        if self.rounds_done < self.cfg.federation_rounds {
            notes.push(format!("round {} complete", self.rounds_done - 1));
            self.transition(Phase::Training)?;
        } else {
            notes.push(format!("federation complete after round {}", self.rounds_done - 1));
            self.transition(Phase::Calibrating)?;
        }
        Ok(notes.join("; "))
    }

    fn step_calibrating(&mut self) -> Result<String, ClientError> {
        let table = build_calibration(&self.model_store, &self.dataset.streams, &self.calibration)?;
        let n = table.rows.len();
        let fit = (((n as f64) * self.cfg.forest_train_fraction) + 0.5).floor() as usize;
        let fit = fit.clamp(1, n - 1);
        let fit_table = CalibrationTable {
            schema: table.schema.clone(),
            rows: table.rows[..fit].to_vec(),
        };
        let cfg = ForestConfig {
            seed: derive_seed(self.client_seed, "forest", 0),
            ..self.cfg.forest.clone()
        };
        let forest = train_forest(&fit_table, &cfg)?;
        for w in &forest.warnings {
            self.warnings.push(format!("{}: {w}", self.address));
        }
        self.calib_table = Some(table);
        self.calib_fit_count = fit;
        self.forest = Some(forest);
        self.transition(Phase::Ready)?;
        Ok(format!("calibrated forest on {fit} rows, {} held out", n - fit))
    }

    /// Serves one prediction. `values` must cover every owned stream
    /// (extras are ignored); raw units go in, the client normalizes.
    pub fn predict_affect(&self, values: &BTreeMap<StreamId, f64>) -> Result<u8, ClientError> {
        let forest = match (&self.forest, self.phase) {
            (Some(f), Phase::Ready) => f,
            _ => return Err(ClientError::NotReady(self.phase)),
        };
        let streams = &self.dataset.streams;
        let mut raw = Vec::with_capacity(streams.len());
        for m in streams.members() {
            match values.get(m) {
                Some(v) => raw.push(*v),
                None => return Err(ClientError::MissingStream(m.clone())),
            }
        }
        let normalized = self.normalizer.normalize_values(&raw);
        let mut x = normalized.clone();
        for subset in &self.subsets {
            let projected: Vec<f64> = subset
                .members()
                .iter()
                .map(|m| normalized[streams.index_of(m).expect("owned stream")])
                .collect();
            let pred = crate::nn::predict_class(&self.model_store[subset], &projected)?;
            x.push(pred as f64);
        }
        Ok(forest.predict_row(&x)?)
    }
}
