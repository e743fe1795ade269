//! Sample data model, CSV ingestion, and the synthetic generator used for
//! desk-scale experiments.
//!
//! A record's feature values are stored as a `Vec<f64>` parallel to the
//! owning dataset's sorted stream subset rather than as a per-record map;
//! with hundreds of thousands of records per experiment the map overhead
//! would dominate. [`PatientDataset::value`] recovers the logical
//! stream-to-value view.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::streams::StreamSubset;

/// Affect labels are integers in `0..=10`.
pub const NUM_CLASSES: usize = 11;

/// Largest device count the generator models.
pub const MAX_DEVICES: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid stream name {0:?}")]
    InvalidStreamName(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("train fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("invalid label skew: {0}")]
    InvalidSkew(String),
    #[error("invalid generator config: {0}")]
    InvalidGenerator(String),
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("normalizer covers {expected} but dataset owns {got}")]
    SubsetMismatch { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Name of one physiological stream, e.g. `ECG` or `EDA`.
///
/// Names are opaque identifiers; the generator knows plausible value
/// ranges for the six default streams and falls back to unit scale for
/// anything else. Names must be usable inside subset keys and CSV
/// headers, so `+`, `,`, whitespace, and the reserved column names `t`
/// and `affect` are rejected.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamId(String);

impl StreamId {
    pub fn new(name: impl Into<String>) -> Result<Self, DataError> {
        let name = name.into();
        let bad = name.is_empty()
            || name == "t"
            || name == "affect"
            || name.chars().any(|c| c == '+' || c == ',' || c.is_whitespace());
        if bad {
            return Err(DataError::InvalidStreamName(name));
        }
        Ok(StreamId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One timestamped observation: a value per owned stream plus the affect
/// label. `values` is parallel to the owning dataset's subset order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub timestamp: i64,
    pub values: Vec<f64>,
    pub label: u8,
}

/// All records collected by one patient node, together with the streams
/// its devices produce.
///
/// Invariants, checked by [`PatientDataset::validate`]: every record has
/// exactly one value per owned stream, labels are `<= 10`, and timestamps
/// are nondecreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientDataset {
    pub patient_id: String,
    pub streams: StreamSubset,
    pub records: Vec<SampleRecord>,
}

impl PatientDataset {
    pub fn new(
        patient_id: impl Into<String>,
        streams: StreamSubset,
        records: Vec<SampleRecord>,
    ) -> Result<Self, DataError> {
        let ds = PatientDataset { patient_id: patient_id.into(), streams, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let width = self.streams.len();
        let mut last_t = i64::MIN;
        for (i, rec) in self.records.iter().enumerate() {
            if rec.values.len() != width {
                return Err(DataError::InvalidRecord {
                    index: i,
                    message: format!("{} values for {} streams", rec.values.len(), width),
                });
            }
            if rec.label as usize >= NUM_CLASSES {
                return Err(DataError::InvalidRecord {
                    index: i,
                    message: format!("label {} out of range", rec.label),
                });
            }
            if !rec.values.iter().all(|v| v.is_finite()) {
                return Err(DataError::InvalidRecord {
                    index: i,
                    message: "non-finite value".into(),
                });
            }
            if rec.timestamp < last_t {
                return Err(DataError::InvalidRecord {
                    index: i,
                    message: format!("timestamp {} decreases", rec.timestamp),
                });
            }
            last_t = rec.timestamp;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Value of `stream` in record `index`, if the stream is owned.
    pub fn value(&self, index: usize, stream: &StreamId) -> Option<f64> {
        let col = self.streams.index_of(stream)?;
        self.records.get(index).map(|r| r.values[col])
    }
}

/// Class-weight vector over the 11 affect labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSkew {
    weights: [f64; NUM_CLASSES],
}

impl LabelSkew {
    /// Weights must be nonnegative, finite, and sum to 1 within 1e-9.
    pub fn new(weights: &[f64]) -> Result<Self, DataError> {
        if weights.len() != NUM_CLASSES {
            return Err(DataError::InvalidSkew(format!(
                "expected {NUM_CLASSES} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DataError::InvalidSkew("weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSkew(format!("weights sum to {sum}, expected 1")));
        }
        let mut w = [0.0; NUM_CLASSES];
        w.copy_from_slice(weights);
        Ok(LabelSkew { weights: w })
    }

    pub fn uniform() -> Self {
        LabelSkew { weights: [1.0 / NUM_CLASSES as f64; NUM_CLASSES] }
    }

    /// Restricts mass to the given classes, renormalized. Used for
    /// per-node class windows in heterogeneity experiments.
    pub fn restricted_to(&self, classes: &[u8]) -> Result<Self, DataError> {
        let mut w = [0.0; NUM_CLASSES];
        for &c in classes {
            if c as usize >= NUM_CLASSES {
                return Err(DataError::InvalidSkew(format!("class {c} out of range")));
            }
            w[c as usize] = self.weights[c as usize];
        }
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Err(DataError::InvalidSkew("restriction removes all mass".into()));
        }
        for v in &mut w {
            *v /= sum;
        }
        Ok(LabelSkew { weights: w })
    }

    /// True when all mass sits on a single class.
    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().filter(|w| **w > 0.0).count() == 1
    }

    pub fn weights(&self) -> &[f64; NUM_CLASSES] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u8 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return c as u8;
            }
        }
        // Rounding tail: final nonzero class.
        self.weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(NUM_CLASSES - 1) as u8
    }
}

// Plausible resting baselines and per-class step sizes for the default
// streams: heart rate (bpm), skin conductance (uS), skin temperature (C),
// respiration (breaths/min), and blood pressure (mmHg). Unknown streams
// fall back to (0, 1) so small synthetic universes work in tests.
const STREAM_PROFILES: &[(&str, f64, f64)] = &[
    ("ECG", 72.0, 6.0),
    ("EDA", 8.0, 1.2),
    ("ST", 33.0, 0.5),
    ("Resp", 16.0, 1.5),
    ("SBP", 120.0, 5.0),
    ("DBP", 80.0, 3.5),
];

/// The six streams used by the reference experiments, in device order.
pub fn default_universe() -> Vec<StreamId> {
    STREAM_PROFILES
        .iter()
        .map(|(name, _, _)| StreamId::new(*name).expect("builtin names are valid"))
        .collect()
}

/// (baseline, per-class unit) for a stream.
pub fn stream_profile(stream: &StreamId) -> (f64, f64) {
    STREAM_PROFILES
        .iter()
        .find(|(name, _, _)| *name == stream.as_str())
        .map(|(_, base, unit)| (*base, *unit))
        .unwrap_or((0.0, 1.0))
}

/// Noise-free generator output for a stream at a given affect class.
/// This is the ground truth the synthetic experiments are scored against.
pub fn class_mean(stream: &StreamId, class: u8) -> f64 {
    let (base, unit) = stream_profile(stream);
    base + unit * (class as f64 - 5.0)
}

/// How patients are assigned device counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceAssignment {
    /// Draw each patient's count from the weight vector.
    Sampled,
    /// Cycle through the supported counts in order, giving exact cohort
    /// sizes for small populations.
    RoundRobin,
}

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    /// Ordered stream universe; nesting takes prefixes of this.
    pub universe: Vec<StreamId>,
    /// `device_count_weights[k-1]` is the probability of owning `k`
    /// devices. Must sum to 1 and put no mass past `universe.len()`.
    pub device_count_weights: Vec<f64>,
    /// Nested ownership (`k` devices = first `k` universe streams) or a
    /// random `k`-subset per patient.
    pub nested: bool,
    pub assignment: DeviceAssignment,
    pub samples_per_patient: usize,
    pub skew: LabelSkew,
    pub noise_sigma: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.universe.is_empty() || self.universe.len() > MAX_DEVICES {
            return Err(DataError::InvalidGenerator(format!(
                "universe must hold 1..={MAX_DEVICES} streams, got {}",
                self.universe.len()
            )));
        }
        let mut sorted = self.universe.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.universe.len() {
            return Err(DataError::InvalidGenerator("duplicate stream in universe".into()));
        }
        let w = &self.device_count_weights;
        if w.is_empty() || w.len() > MAX_DEVICES {
            return Err(DataError::InvalidGenerator(format!(
                "device count weights must hold 1..={MAX_DEVICES} entries, got {}",
                w.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(DataError::InvalidGenerator(
                "device count weights must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidGenerator(format!(
                "device count weights sum to {sum}, expected 1"
            )));
        }
        if w.iter().enumerate().any(|(i, x)| *x > 0.0 && i + 1 > self.universe.len()) {
            return Err(DataError::InvalidGenerator(
                "device count weights put mass past the universe size".into(),
            ));
        }
        if self.samples_per_patient == 0 {
            return Err(DataError::InvalidGenerator("samples_per_patient must be >= 1".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(DataError::InvalidGenerator(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generator output plus any warnings about degenerate settings.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub patients: Vec<PatientDataset>,
    pub warnings: Vec<String>,
}

/// Generates one patient's records. Values are
/// `class_mean(stream, label) + unit * N(0, noise_sigma)`, timestamps are
/// `t0, t0+1, ..`, labels are drawn from `skew`.
pub fn generate_patient(
    seed: u64,
    patient_id: &str,
    streams: StreamSubset,
    n_samples: usize,
    skew: &LabelSkew,
    noise_sigma: f64,
    t0: i64,
) -> PatientDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let profiles: Vec<(f64, f64)> = streams.members().iter().map(stream_profile).collect();
    let mut records = Vec::with_capacity(n_samples);
    for t in 0..n_samples {
        let label = skew.sample(&mut rng);
        let centered = label as f64 - 5.0;
        let values = profiles
            .iter()
            .map(|(base, unit)| {
                let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
                base + unit * (centered + eps)
            })
            .collect();
        records.push(SampleRecord { timestamp: t0 + t as i64, values, label });
    }
    PatientDataset {
        patient_id: patient_id.to_string(),
        streams,
        records,
    }
}

/// Generates a full synthetic population. Device counts, stream picks,
/// and per-patient record streams all derive from `seed`, so the output
/// is a pure function of its arguments.
pub fn generate_synthetic(
    seed: u64,
    n_patients: usize,
    cfg: &GeneratorConfig,
) -> Result<Synthetic, DataError> {
    let mut warnings = Vec::new();
    if cfg.skew.is_degenerate() {
        warnings.push("label skew is degenerate: every sample gets the same class".to_string());
    }
    let assigned = assign_streams(seed, n_patients, cfg)?;
    let mut patients = Vec::with_capacity(n_patients);
    for (i, streams) in assigned.into_iter().enumerate() {
        let patient_seed = derive_seed(seed, "patient", i as u64);
        patients.push(generate_patient(
            patient_seed,
            &format!("p{i:03}"),
            streams,
            cfg.samples_per_patient,
            &cfg.skew,
            cfg.noise_sigma,
            0,
        ));
    }
    Ok(Synthetic { patients, warnings })
}

/// The device-assignment half of [`generate_synthetic`]: which streams
/// each patient ends up owning, before any samples are drawn. Exposed so
/// callers that vary other knobs per patient (label skew, mostly) can
/// still reproduce the exact populations the generator would build.
pub fn assign_streams(
    seed: u64,
    n_patients: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<StreamSubset>, DataError> {
    cfg.validate()?;
    if n_patients == 0 {
        return Err(DataError::InvalidGenerator("n_patients must be >= 1".into()));
    }
    let supported: Vec<usize> = cfg
        .device_count_weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, _)| i + 1)
        .collect();
    let mut device_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "devices", 0));
    let mut assigned = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let k = match cfg.assignment {
            DeviceAssignment::RoundRobin => supported[i % supported.len()],
            DeviceAssignment::Sampled => {
                let u: f64 = device_rng.random();
                let mut acc = 0.0;
                let mut chosen = supported[supported.len() - 1];
                for (j, &w) in cfg.device_count_weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        chosen = j + 1;
                        break;
                    }
                }
                chosen
            }
        };
        let members: Vec<StreamId> = if cfg.nested {
            cfg.universe[..k].to_vec()
        } else {
            // Random k-subset: partial Fisher-Yates over universe indices.
            let mut idx: Vec<usize> = (0..cfg.universe.len()).collect();
            for j in 0..k {
                let pick = device_rng.random_range(j..idx.len());
                idx.swap(j, pick);
            }
            idx[..k].iter().map(|&j| cfg.universe[j].clone()).collect()
        };
        let streams = StreamSubset::new(members)
            .map_err(|e| DataError::InvalidGenerator(e.to_string()))?;
        assigned.push(streams);
    }
    Ok(assigned)
}

/// Splits records into train and test partitions. The train side gets
/// `round(n * train_fraction)` records (half away from zero), membership
/// is a seeded uniform draw, and both sides keep original record order so
/// the timestamp invariant survives.
pub fn train_test_split(
    ds: &PatientDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(PatientDataset, PatientDataset), DataError> {
    if ds.records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let n = ds.records.len();
    let n_train = ((n as f64 * train_fraction) + 0.5).floor() as usize;
    let n_train = n_train.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in (1..n).rev() {
        let pick = rng.random_range(0..=j);
        idx.swap(j, pick);
    }
    let mut in_train = vec![false; n];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let collect = |keep: bool| -> Vec<SampleRecord> {
        ds.records
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == keep)
            .map(|(r, _)| r.clone())
            .collect()
    };
    let train = PatientDataset {
        patient_id: ds.patient_id.clone(),
        streams: ds.streams.clone(),
        records: collect(true),
    };
    let test = PatientDataset {
        patient_id: ds.patient_id.clone(),
        streams: ds.streams.clone(),
        records: collect(false),
    };
    Ok((train, test))
}

/// Loads a patient CSV. Expected header: `t`, one column per stream in
/// `streams`, and `affect`; extra columns are ignored. The patient id is
/// the file stem.
pub fn load_csv(path: &Path, streams: &StreamSubset) -> Result<PatientDataset, DataError> {
    let file = std::fs::File::open(path)?;
    let patient_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "patient".to_string());
    read_csv(file, &patient_id, streams)
}

/// CSV reader core, separated from the filesystem for tests.
pub fn read_csv(
    reader: impl Read,
    patient_id: &str,
    streams: &StreamSubset,
) -> Result<PatientDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col_of = |name: &str| headers.iter().position(|h| h == name);
    let t_col = col_of("t").ok_or_else(|| DataError::MissingColumn("t".into()))?;
    let affect_col = col_of("affect").ok_or_else(|| DataError::MissingColumn("affect".into()))?;
    let stream_cols: Vec<usize> = streams
        .members()
        .iter()
        .map(|s| col_of(s.as_str()).ok_or_else(|| DataError::MissingColumn(s.as_str().into())))
        .collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut last_t = i64::MIN;
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = i + 1;
        let field = |col: usize| -> Result<&str, DataError> {
            row.get(col).ok_or_else(|| DataError::ParseError {
                row: rownum,
                message: format!("missing field {col}"),
            })
        };
        let timestamp: i64 = field(t_col)?.trim().parse().map_err(|_| DataError::ParseError {
            row: rownum,
            message: format!("timestamp {:?} is not an integer", field(t_col).unwrap_or("")),
        })?;
        if timestamp < last_t {
            return Err(DataError::ParseError {
                row: rownum,
                message: format!("timestamp {timestamp} decreases"),
            });
        }
        last_t = timestamp;
        let mut values = Vec::with_capacity(stream_cols.len());
        for (&col, stream) in stream_cols.iter().zip(streams.members()) {
            let raw = field(col)?.trim();
            if raw.is_empty() {
                return Err(DataError::ParseError {
                    row: rownum,
                    message: format!("missing value for {stream}"),
                });
            }
            let v: f64 = raw.parse().map_err(|_| DataError::ParseError {
                row: rownum,
                message: format!("value {raw:?} for {stream} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    row: rownum,
                    message: format!("value for {stream} is not finite"),
                });
            }
            values.push(v);
        }
        let raw_affect = field(affect_col)?.trim();
        let label: i64 = raw_affect.parse().map_err(|_| DataError::ParseError {
            row: rownum,
            message: format!("affect {raw_affect:?} is not an integer"),
        })?;
        if !(0..NUM_CLASSES as i64).contains(&label) {
            return Err(DataError::ParseError {
                row: rownum,
                message: format!("affect {label} out of range 0..=10"),
            });
        }
        records.push(SampleRecord { timestamp, values, label: label as u8 });
    }
    PatientDataset::new(patient_id, streams.clone(), records)
}

/// Writes a dataset in the same CSV schema `load_csv` reads.
pub fn write_csv(ds: &PatientDataset, path: &Path) -> Result<(), DataError> {
    let bytes = csv_bytes(ds)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Canonical CSV serialization of a record batch. Also the byte form the
/// privacy audit hashes when checking that raw data never crosses the
/// ledger.
pub fn csv_bytes(ds: &PatientDataset) -> Result<Vec<u8>, DataError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(ds.streams.members().iter().map(|s| s.as_str().to_string()));
    header.push("affect".to_string());
    wtr.write_record(&header)?;
    for rec in &ds.records {
        let mut row = vec![rec.timestamp.to_string()];
        row.extend(rec.values.iter().map(|v| format!("{v}")));
        row.push(rec.label.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(wtr.into_inner().expect("vec writer cannot fail"))
}

/// Per-stream affine normalization: `(v - offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub subset: StreamSubset,
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Normalizer {
    /// Fixed normalization from the generator's stream profiles. Keeps
    /// feature scales aligned across nodes regardless of local label
    /// mix, which matters when records are pooled or models averaged.
    pub fn reference(subset: &StreamSubset) -> Normalizer {
        let (offsets, scales) = subset
            .members()
            .iter()
            .map(stream_profile)
            .map(|(base, unit)| (base, 3.0 * unit))
            .unzip();
        Normalizer { subset: subset.clone(), offsets, scales }
    }

    /// Per-stream mean and standard deviation estimated from `ds`
    /// (typically a training split). Degenerate streams get scale 1.
    pub fn from_train_stats(ds: &PatientDataset) -> Result<Normalizer, DataError> {
        if ds.records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let n = ds.records.len() as f64;
        let width = ds.streams.len();
        let mut mean = vec![0.0; width];
        for rec in &ds.records {
            for (m, v) in mean.iter_mut().zip(&rec.values) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; width];
        for rec in &ds.records {
            for ((s, v), m) in var.iter_mut().zip(&rec.values).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let scales = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Normalizer { subset: ds.streams.clone(), offsets: mean, scales })
    }

    pub fn normalize_values(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.offsets.iter().zip(&self.scales))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    /// Returns a normalized copy of `ds`, which must own exactly the
    /// subset this normalizer was built for.
    pub fn normalize_dataset(&self, ds: &PatientDataset) -> Result<PatientDataset, DataError> {
        if ds.streams != self.subset {
            return Err(DataError::SubsetMismatch {
                expected: self.subset.key(),
                got: ds.streams.key(),
            });
        }
        let records = ds
            .records
            .iter()
            .map(|r| SampleRecord {
                timestamp: r.timestamp,
                values: self.normalize_values(&r.values),
                label: r.label,
            })
            .collect();
        Ok(PatientDataset {
            patient_id: ds.patient_id.clone(),
            streams: ds.streams.clone(),
            records,
        })
    }
}
