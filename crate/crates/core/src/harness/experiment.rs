//! The federation experiment: build a synthetic population, drive every
//! client through the contract with a fair but randomized scheduler,
//! then evaluate the models, audit the ledger, and assemble the report.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::{parse_ledger, verify_ledger, ArchivedPayload, Contract, LedgerEntry};
use crate::chain::replay_ledger;
use crate::client::ClientState;
use crate::dataset::{
    assign_streams, csv_bytes, generate_patient, train_test_split, LabelSkew, Normalizer,
    PatientDataset,
};
use crate::hashing::{derive_seed, digest64};
use crate::nn::{accuracy, train, NetShape, Row, TrainConfig};
use crate::streams::{project, StreamSubset};

use super::config::{ExperimentConfig, HarnessError, Normalization};
use super::metrics::{mean, MetricsReport};

/// One patient's data as the experiment sees it: generated, split three
/// ways, and normalized. Raw splits are kept for the privacy audit.
pub struct PatientData {
    pub id: String,
    pub raw_train: PatientDataset,
    pub raw_calibration: PatientDataset,
    pub raw_test: PatientDataset,
    pub train: PatientDataset,
    pub calibration: PatientDataset,
    pub test: PatientDataset,
    pub normalizer: Normalizer,
}

/// Generates and splits the whole population. Patient `i`'s streams,
/// samples, and splits depend only on the config, so two calls agree
/// bit for bit.
pub fn build_population(cfg: &ExperimentConfig) -> Result<Vec<PatientData>, HarnessError> {
    cfg.validate()?;
    let gen = cfg.generator()?;
    let assigned = assign_streams(cfg.seed, cfg.patients, &gen)?;
    let uniform = LabelSkew::uniform();
    let mut population = Vec::with_capacity(cfg.patients);
    for (i, streams) in assigned.into_iter().enumerate() {
        let skew = match cfg.class_window(i) {
            Some(window) => uniform.restricted_to(&window)?,
            None => uniform.clone(),
        };
        let id = format!("p{i:03}");
        let ds = generate_patient(
            derive_seed(cfg.seed, "patient", i as u64),
            &id,
            streams,
            cfg.samples_per_patient,
            &skew,
            cfg.noise_sigma,
            0,
        );
        let (raw_train, rest) = train_test_split(
            &ds,
            cfg.train_fraction,
            derive_seed(cfg.seed, "split-train", i as u64),
        )?;
        let cal_share = cfg.calibration_fraction / (1.0 - cfg.train_fraction);
        let (raw_calibration, raw_test) =
            train_test_split(&rest, cal_share, derive_seed(cfg.seed, "split-cal", i as u64))?;
        let normalizer = match cfg.normalization {
            Normalization::Reference => Normalizer::reference(&ds.streams),
            Normalization::TrainStats => Normalizer::from_train_stats(&raw_train)?,
        };
        population.push(PatientData {
            id,
            train: normalizer.normalize_dataset(&raw_train)?,
            calibration: normalizer.normalize_dataset(&raw_calibration)?,
            test: normalizer.normalize_dataset(&raw_test)?,
            raw_train,
            raw_calibration,
            raw_test,
            normalizer,
        });
    }
    Ok(population)
}

pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub ledger: Vec<LedgerEntry>,
    pub archive: BTreeMap<u64, ArchivedPayload>,
    pub clients: Vec<ClientState>,
}

/// Runs the full pipeline for one config: population, federation,
/// calibration, evaluation, ledger verification and replay, privacy
/// audit. Deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let population = build_population(cfg)?;
    let mut warnings: Vec<String> = Vec::new();

    let model_seed_base = derive_seed(cfg.seed, "models", 0);
    let mut clients = Vec::with_capacity(population.len());
    for p in &population {
        clients.push(ClientState::new(
            crate::chain::Address::new(&p.id)?,
            p.train.clone(),
            p.calibration.records.clone(),
            p.normalizer.clone(),
            cfg.client_config(model_seed_base),
        )?);
    }

    let mut contract =
        Contract::new(derive_seed(cfg.seed, "contract", 0), cfg.election_policy());
    let mut dropped: BTreeSet<usize> = BTreeSet::new();
    let mut dropout_pending = !cfg.dropout_clients.is_empty();
    let mut ticks = 0u64;

    for tick in 0..cfg.max_ticks {
        let live: Vec<usize> =
            (0..clients.len()).filter(|i| !dropped.contains(i)).collect();
        if live.iter().all(|&i| clients[i].is_ready()) {
            break;
        }
        ticks = tick + 1;
        let mut order = live.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tick", tick));
        order.shuffle(&mut rng);
        for &i in &order {
            clients[i].step(&mut contract)?;
        }
        // The election fires once every live client has registered its
        // trained subsets for the current round.
        let all_registered = live
            .iter()
            .all(|&i| contract.state().finished.contains(clients[i].address()));
        if !contract.election_done() && all_registered {
            let subsets: BTreeSet<StreamSubset> = live
                .iter()
                .flat_map(|&i| clients[i].subsets().iter().cloned())
                .collect();
            let subsets: Vec<StreamSubset> = subsets.into_iter().collect();
            contract.elect_aggregators(&subsets)?;
            // Crash the configured clients right after the first
            // election. Aggregators stay up; killing one would strand
            // its subsets for the round.
            if dropout_pending {
                dropout_pending = false;
                for &idx in &cfg.dropout_clients {
                    let addr = clients[idx].address().clone();
                    if contract.assignments_for(&addr).is_empty() {
                        contract.mark_dropout(&addr);
                        dropped.insert(idx);
                    } else {
                        warnings.push(format!(
                            "dropout request for {addr} ignored: elected aggregator"
                        ));
                    }
                }
            }
        }
    }

    let live: Vec<usize> = (0..clients.len()).filter(|i| !dropped.contains(i)).collect();
    if !live.iter().all(|&i| clients[i].is_ready()) {
        let phases = live
            .iter()
            .filter(|&&i| !clients[i].is_ready())
            .map(|&i| format!("{}:{}", clients[i].address(), clients[i].phase()))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(HarnessError::Stalled { ticks: cfg.max_ticks, phases });
    }

    // Evaluation: pool every patient's test split per subset cohort and
    // score the (identical) aggregates once.
    let mut models: BTreeMap<StreamSubset, crate::nn::ModelParams> = BTreeMap::new();
    for &i in &live {
        for (s, m) in clients[i].models() {
            models.entry(s.clone()).or_insert_with(|| m.clone());
        }
    }
    let mut subset_test_accuracy = BTreeMap::new();
    let mut cohort_sizes = BTreeMap::new();
    for (subset, params) in &models {
        let mut rows: Vec<Row> = Vec::new();
        let mut cohort = 0usize;
        for p in &population {
            if !subset.is_subset_of(&p.test.streams) {
                continue;
            }
            cohort += 1;
            let projected = project(&p.test, subset)?;
            rows.extend(
                projected.records.iter().map(|r| (r.values.clone(), r.label)),
            );
        }
        cohort_sizes.insert(subset.key(), cohort);
        subset_test_accuracy.insert(subset.key(), accuracy(params, &rows)?);
    }

    let mut forest_holdout_accuracy = BTreeMap::new();
    let mut best_model_holdout_accuracy = BTreeMap::new();
    for &i in &live {
        let c = &clients[i];
        if let Some(acc) = c.holdout_forest_accuracy() {
            forest_holdout_accuracy.insert(c.address().to_string(), acc);
        }
        if let Some(best) = c
            .holdout_model_accuracies()
            .values()
            .cloned()
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        {
            best_model_holdout_accuracy.insert(c.address().to_string(), best);
        }
    }

    // Ledger audit: structural verification plus a full replay of every
    // aggregate from the archived payloads.
    let ledger = parse_ledger(&contract.export_ledger())?;
    let stats = verify_ledger(&ledger)?;
    let replay = replay_ledger(&ledger, contract.archive(), cfg.aggregation_rule())?;

    // Privacy audit: no split of any patient's data, raw or normalized,
    // may hash to anything the ledger carries.
    let ledger_digests: BTreeSet<u64> = ledger.iter().filter_map(|e| e.digest).collect();
    let mut privacy_probes = 0usize;
    let mut privacy_hits = 0usize;
    for p in &population {
        for ds in [
            &p.raw_train,
            &p.raw_calibration,
            &p.raw_test,
            &p.train,
            &p.calibration,
            &p.test,
        ] {
            privacy_probes += 1;
            if ledger_digests.contains(&digest64(&csv_bytes(ds)?)) {
                privacy_hits += 1;
            }
        }
    }

    for &i in &live {
        warnings.extend(clients[i].warnings().iter().cloned());
    }
    warnings.sort();

    let report = MetricsReport {
        seed: cfg.seed,
        patients: cfg.patients,
        rounds: cfg.rounds,
        ticks,
        cohort_sizes,
        mean_forest_accuracy: mean(&forest_holdout_accuracy),
        mean_best_model_accuracy: mean(&best_model_holdout_accuracy),
        subset_test_accuracy,
        forest_holdout_accuracy,
        best_model_holdout_accuracy,
        dropped_clients: dropped
            .iter()
            .map(|&i| clients[i].address().to_string())
            .collect(),
        ledger_entries: stats.entries,
        ledger_rounds: stats.rounds,
        replayed_aggregates: replay.aggregates_checked,
        privacy_probes,
        privacy_hits,
        warnings,
    };
    let archive = contract.archive().clone();
    Ok(ExperimentOutput { report, ledger, archive, clients })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BaselineReport {
    pub train_rows: usize,
    pub test_rows: usize,
    pub accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Centralized reference point: every patient gets the full universe,
/// all training rows are pooled, and one model is trained on the pool.
/// The federation should be compared against this ceiling.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<BaselineReport, HarnessError> {
    cfg.validate()?;
    let universe = cfg.universe_streams()?;
    let streams = StreamSubset::new(universe)?;
    let skew = LabelSkew::uniform();
    let normalizer = Normalizer::reference(&streams);
    let mut train_rows: Vec<Row> = Vec::new();
    let mut test_rows: Vec<Row> = Vec::new();
    for i in 0..cfg.patients {
        let ds = generate_patient(
            derive_seed(cfg.seed, "patient", i as u64),
            &format!("p{i:03}"),
            streams.clone(),
            cfg.samples_per_patient,
            &skew,
            cfg.noise_sigma,
            0,
        );
        let (tr, te) = train_test_split(
            &ds,
            cfg.train_fraction,
            derive_seed(cfg.seed, "split-train", i as u64),
        )?;
        for (split, rows) in [(&tr, &mut train_rows), (&te, &mut test_rows)] {
            let normalized = normalizer.normalize_dataset(split)?;
            rows.extend(normalized.records.iter().map(|r| (r.values.clone(), r.label)));
        }
    }
    let shape = NetShape::new(streams.len(), cfg.hidden.clone())?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "baseline", 0),
        ..cfg.train_config()
    };
    let (params, history) = train(&train_rows, &shape, &train_cfg)?;
    Ok(BaselineReport {
        train_rows: train_rows.len(),
        test_rows: test_rows.len(),
        accuracy: accuracy(&params, &test_rows)?,
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NUM_CLASSES;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            patients: 6,
            universe: vec!["ST".into(), "ECG".into(), "EDA".into(), "Resp".into()],
            assignment: super::super::config::Assignment::RoundRobin,
            nested_devices: true,
            device_count_weights: vec![0.25; 4],
            samples_per_patient: 80,
            rounds: 2,
            hidden: vec![12],
            max_epochs: 8,
            trees: 8,
            max_ticks: 120,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn population_is_reproducible_and_split_sizes_add_up() {
        let cfg = small_cfg();
        let a = build_population(&cfg).unwrap();
        let b = build_population(&cfg).unwrap();
        assert_eq!(a.len(), cfg.patients);
        let (n_tr, n_cal, n_te) = cfg.split_counts();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.raw_train.records, pb.raw_train.records);
            assert_eq!(pa.test.records, pb.test.records);
            assert_eq!(pa.raw_train.len(), n_tr);
            assert_eq!(pa.raw_calibration.len(), n_cal);
            assert_eq!(pa.raw_test.len(), n_te);
        }
    }

    #[test]
    fn nested_round_robin_universe_yields_prefix_cohorts() {
        let cfg = small_cfg();
        let pop = build_population(&cfg).unwrap();
        // Patients cycle through prefixes of [ST, ECG, EDA, Resp].
        assert_eq!(pop[0].train.streams.key(), "ST");
        assert_eq!(pop[1].train.streams.key(), "ECG+ST");
        assert_eq!(pop[3].train.streams.key(), "ECG+EDA+Resp+ST");
        assert_eq!(pop[4].train.streams.key(), "ST");
    }

    #[test]
    fn class_windows_restrict_observed_labels() {
        let cfg = ExperimentConfig {
            classes_per_node: 3,
            class_stride: 4,
            ..small_cfg()
        };
        let pop = build_population(&cfg).unwrap();
        for (i, p) in pop.iter().enumerate() {
            let window: BTreeSet<u8> =
                cfg.class_window(i).unwrap().into_iter().collect();
            for r in &p.raw_train.records {
                assert!(window.contains(&r.label), "patient {i} saw label {}", r.label);
            }
        }
        assert!(cfg.class_window(0).unwrap().len() < NUM_CLASSES);
    }

    #[test]
    fn experiment_runs_end_to_end_and_report_is_clean() {
        let cfg = small_cfg();
        let out = run_experiment(&cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.patients, 6);
        assert!(r.ticks > 0);
        // Nested universe of 4 has exactly 15 subsets, but this small
        // population only realizes the 4 prefixes' power sets.
        assert!(!r.subset_test_accuracy.is_empty());
        assert_eq!(r.privacy_hits, 0);
        assert_eq!(r.privacy_probes, 6 * cfg.patients);
        assert!(r.replayed_aggregates > 0);
        assert!(r.ledger_entries > 0);
        assert!(out.clients.iter().all(|c| c.is_ready()));
        // Full-universe cohort trains the full subset; everyone shares ST.
        assert_eq!(r.cohort_sizes["ST"], 6);
        assert_eq!(r.cohort_sizes["ECG+EDA+Resp+ST"], 1);
    }

    #[test]
    fn reruns_serialize_identically() {
        let cfg = small_cfg();
        let a = run_experiment(&cfg).unwrap().report.to_json();
        let b = run_experiment(&cfg).unwrap().report.to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn dropouts_crash_but_the_federation_finishes() {
        let mut cfg = small_cfg();
        cfg.patients = 8;
        cfg.dropout_clients = vec![4, 6];
        let out = run_experiment(&cfg).unwrap();
        let dropped = &out.report.dropped_clients;
        let ignored = out
            .report
            .warnings
            .iter()
            .filter(|w| w.contains("dropout request"))
            .count();
        assert_eq!(dropped.len() + ignored, 2);
        for c in &out.clients {
            let was_dropped = dropped.contains(&c.address().to_string());
            assert_eq!(c.is_ready(), !was_dropped);
        }
    }

    #[test]
    fn baseline_trains_and_scores() {
        let cfg = ExperimentConfig {
            seed: 3,
            patients: 4,
            samples_per_patient: 60,
            universe: vec!["ECG".into(), "EDA".into()],
            hidden: vec![8],
            max_epochs: 5,
            ..ExperimentConfig::default()
        };
        let r = run_baseline(&cfg).unwrap();
        assert!(r.train_rows > 0 && r.test_rows > 0);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(r.epochs_run <= 5);
    }
}
