//! Stream-subset algebra: canonical subsets, power sets, projection, and
//! cohort assignment.
//!
//! Subsets order by size then lexicographically by member names. That
//! single ordering drives everything downstream: power-set enumeration,
//! `BTreeMap` iteration in clients and reports, and ledger output all
//! agree on it.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::dataset::{PatientDataset, SampleRecord, StreamId};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("subset must not be empty")]
    EmptySubset,
    #[error("dataset {patient:?} does not own: {}", missing.join(", "))]
    MissingStreams { patient: String, missing: Vec<String> },
    #[error("invalid subset key {key:?}: {message}")]
    InvalidKey { key: String, message: String },
}

/// Non-empty, sorted, duplicate-free set of streams.
///
/// The canonical text form is the `+`-joined member list, e.g.
/// `ECG+EDA+ST`; it doubles as the map key in ledgers, file names, and
/// reports.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct StreamSubset {
    members: Vec<StreamId>,
}

impl StreamSubset {
    pub fn new(mut members: Vec<StreamId>) -> Result<Self, StreamError> {
        members.sort();
        members.dedup();
        if members.is_empty() {
            return Err(StreamError::EmptySubset);
        }
        Ok(StreamSubset { members })
    }

    pub fn singleton(stream: StreamId) -> Self {
        StreamSubset { members: vec![stream] }
    }

    /// Members already sorted and unique; private fast path.
    fn from_sorted(members: Vec<StreamId>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(!members.is_empty());
        StreamSubset { members }
    }

    pub fn members(&self) -> &[StreamId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor forbids empty subsets
    }

    pub fn contains(&self, stream: &StreamId) -> bool {
        self.members.binary_search(stream).is_ok()
    }

    /// Position of `stream` in the canonical member order, which is also
    /// its column index in any dataset owning this subset.
    pub fn index_of(&self, stream: &StreamId) -> Option<usize> {
        self.members.binary_search(stream).ok()
    }

    pub fn is_subset_of(&self, other: &StreamSubset) -> bool {
        self.members.iter().all(|m| other.contains(m))
    }

    /// Canonical `+`-joined key.
    pub fn key(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                out.push('+');
            }
            out.push_str(m.as_str());
        }
        out
    }

    /// Parses a `+`-joined key back into a subset.
    pub fn parse_key(key: &str) -> Result<Self, StreamError> {
        let mut members = Vec::new();
        for part in key.split('+') {
            let id = StreamId::new(part).map_err(|e| StreamError::InvalidKey {
                key: key.to_string(),
                message: e.to_string(),
            })?;
            members.push(id);
        }
        StreamSubset::new(members)
    }
}

impl Ord for StreamSubset {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.members
            .len()
            .cmp(&other.members.len())
            .then_with(|| self.members.cmp(&other.members))
    }
}

impl PartialOrd for StreamSubset {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for StreamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl fmt::Debug for StreamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.key())
    }
}

/// All `2^n - 1` non-empty subsets of `streams`, the full set included,
/// ordered by size then lexicographically. A node owning these streams
/// trains one model per returned subset.
pub fn power_set(streams: &StreamSubset) -> Vec<StreamSubset> {
    let n = streams.len();
    let mut out = Vec::with_capacity((1usize << n) - 1);
    for mask in 1u32..(1u32 << n) {
        let members: Vec<StreamId> = streams
            .members()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, m)| m.clone())
            .collect();
        out.push(StreamSubset::from_sorted(members));
    }
    out.sort();
    out
}

/// Restriction of a dataset to a subset of its streams. Record order,
/// timestamps, and labels are untouched; value columns are re-selected.
pub fn project(ds: &PatientDataset, subset: &StreamSubset) -> Result<PatientDataset, StreamError> {
    let mut cols = Vec::with_capacity(subset.len());
    let mut missing = Vec::new();
    for m in subset.members() {
        match ds.streams.index_of(m) {
            Some(i) => cols.push(i),
            None => missing.push(m.as_str().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(StreamError::MissingStreams { patient: ds.patient_id.clone(), missing });
    }
    let records = ds
        .records
        .iter()
        .map(|r| SampleRecord {
            timestamp: r.timestamp,
            values: cols.iter().map(|&c| r.values[c]).collect(),
            label: r.label,
        })
        .collect();
    Ok(PatientDataset {
        patient_id: ds.patient_id.clone(),
        streams: subset.clone(),
        records,
    })
}

/// Cohort assignment: for each subset appearing in any patient's power
/// set, the patients qualified to train it (those owning a superset),
/// with their records projected onto the subset.
#[derive(Debug, Default)]
pub struct CohortMap {
    pub entries: BTreeMap<StreamSubset, Vec<(String, PatientDataset)>>,
}

impl CohortMap {
    /// Number of cohorts a given patient belongs to.
    pub fn membership_count(&self, patient_id: &str) -> usize {
        self.entries
            .values()
            .filter(|members| members.iter().any(|(id, _)| id == patient_id))
            .count()
    }
}

/// Builds the cohort map for a population. Patients appear within each
/// cohort in input order.
pub fn build_cohorts(patients: &[PatientDataset]) -> CohortMap {
    let mut map = CohortMap::default();
    for p in patients {
        for subset in power_set(&p.streams) {
            let projected = project(p, &subset).expect("power set members are owned");
            map.entries
                .entry(subset)
                .or_default()
                .push((p.patient_id.clone(), projected));
        }
    }
    map
}
