//! Node-count sweep: how much does averaging across nodes buy over
//! training alone, as the federation grows?
//!
//! The sweep sidesteps the contract entirely. Every node holds the full
//! stream universe and (optionally) a restricted label window, the
//! cohort runs synchronous rounds of local training plus averaging, and
//! each node's solo model gets the same total epoch budget. All models
//! are scored on the pooled test split, so a node that only ever saw
//! four classes pays for it there.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregate::{fed_average_with, WeightedParams};
use crate::dataset::{generate_patient, train_test_split, LabelSkew, Normalizer};
use crate::hashing::derive_seed;
use crate::nn::{accuracy, init_params, train_from, NetShape, Row, TrainConfig};
use crate::streams::StreamSubset;

use super::config::{ExperimentConfig, HarnessError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub nodes: usize,
    pub federated_accuracy: f64,
    /// Per-node isolated accuracy, node order.
    pub solo_accuracies: Vec<f64>,
    pub median_solo_accuracy: f64,
    pub test_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs one sweep point per entry in `node_counts`. Reuses the config's
/// data and training knobs; `classes_per_node` controls the per-node
/// label windows exactly as in the full experiment.
pub fn node_sweep(
    cfg: &ExperimentConfig,
    node_counts: &[usize],
) -> Result<SweepReport, HarnessError> {
    cfg.validate()?;
    if node_counts.is_empty() || node_counts.contains(&0) {
        return Err(HarnessError::Invalid("node counts must be positive".into()));
    }
    let streams = StreamSubset::new(cfg.universe_streams()?)?;
    let shape = NetShape::new(streams.len(), cfg.hidden.clone())?;
    let normalizer = Normalizer::reference(&streams);
    let uniform = LabelSkew::uniform();
    let mut points = Vec::with_capacity(node_counts.len());

    for &n_nodes in node_counts {
        let point_seed = derive_seed(cfg.seed, "sweep", n_nodes as u64);
        let mut node_rows: Vec<Vec<Row>> = Vec::with_capacity(n_nodes);
        let mut test_rows: Vec<Row> = Vec::new();
        for i in 0..n_nodes {
            let skew = match cfg.class_window(i) {
                Some(w) => uniform.restricted_to(&w)?,
                None => uniform.clone(),
            };
            let ds = generate_patient(
                derive_seed(point_seed, "node", i as u64),
                &format!("n{i:03}"),
                streams.clone(),
                cfg.samples_per_patient,
                &skew,
                cfg.noise_sigma,
                0,
            );
            let (tr, te) = train_test_split(
                &ds,
                cfg.train_fraction,
                derive_seed(point_seed, "split", i as u64),
            )?;
            let tr = normalizer.normalize_dataset(&tr)?;
            let te = normalizer.normalize_dataset(&te)?;
            node_rows.push(tr.records.iter().map(|r| (r.values.clone(), r.label)).collect());
            test_rows.extend(te.records.iter().map(|r| (r.values.clone(), r.label)));
        }
        // Pooled evaluation rows in a seeded shuffle, purely cosmetic
        // since accuracy is order-free, but it keeps eyeballed dumps
        // from looking sorted by node.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(point_seed, "testshuffle", 0));
        test_rows.shuffle(&mut rng);

        let init = init_params(&shape, derive_seed(point_seed, "init", 0));
        let rounds = cfg.rounds as usize;

        // Synchronous federation: everyone trains from the shared
        // params, the sample-weighted average becomes the next round's
        // starting point.
        let mut global = init.clone();
        for round in 0..rounds {
            let mut contributions = Vec::with_capacity(n_nodes);
            for (i, rows) in node_rows.iter().enumerate() {
                let tc = TrainConfig {
                    seed: derive_seed(point_seed, "fed", (round * n_nodes + i) as u64),
                    ..cfg.train_config()
                };
                let (params, _) = train_from(global.clone(), rows, &tc)?;
                contributions.push(WeightedParams { params, n_samples: rows.len() as u64 });
            }
            global = fed_average_with(cfg.aggregation_rule(), &contributions)?;
        }
        let federated_accuracy = accuracy(&global, &test_rows)?;

        // Solo reference: same initialization, same total epoch budget,
        // no averaging.
        let mut solo_accuracies = Vec::with_capacity(n_nodes);
        for (i, rows) in node_rows.iter().enumerate() {
            let tc = TrainConfig {
                seed: derive_seed(point_seed, "solo", i as u64),
                max_epochs: cfg.max_epochs * rounds,
                ..cfg.train_config()
            };
            let (params, _) = train_from(init.clone(), rows, &tc)?;
            solo_accuracies.push(accuracy(&params, &test_rows)?);
        }

        points.push(SweepPoint {
            nodes: n_nodes,
            federated_accuracy,
            median_solo_accuracy: median(&solo_accuracies),
            solo_accuracies,
            test_rows: test_rows.len(),
        });
    }
    Ok(SweepReport { points })
}
