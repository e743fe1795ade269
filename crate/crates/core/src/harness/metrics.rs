//! Run metrics. Every collection is ordered and every number comes from
//! a seeded computation, so serializing a report twice from the same
//! config yields identical bytes.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub patients: usize,
    pub rounds: u64,
    /// Scheduler ticks until every live client reached Ready.
    pub ticks: u64,
    /// Patients participating in each subset's cohort.
    pub cohort_sizes: BTreeMap<String, usize>,
    /// Aggregate model accuracy on the pooled test split, per subset.
    pub subset_test_accuracy: BTreeMap<String, f64>,
    /// Forest accuracy on each client's calibration holdout.
    pub forest_holdout_accuracy: BTreeMap<String, f64>,
    /// Best single subset model on the same holdout, per client.
    pub best_model_holdout_accuracy: BTreeMap<String, f64>,
    pub mean_forest_accuracy: f64,
    pub mean_best_model_accuracy: f64,
    pub dropped_clients: Vec<String>,
    pub ledger_entries: usize,
    pub ledger_rounds: u64,
    /// Aggregates re-derived from archived payloads during replay.
    pub replayed_aggregates: usize,
    /// Dataset digests probed against the ledger, and how many matched.
    /// Any hit means raw or normalized records reached the chain.
    pub privacy_probes: usize,
    pub privacy_hits: usize,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Mean of the map's values; zero when empty so reports stay valid JSON.
pub(crate) fn mean(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.values().sum::<f64>() / values.len() as f64
}
