//! Random-forest meta-learner.
//!
//! After federation a client holds one model per owned stream subset.
//! The forest stacks them: its input columns are the raw stream values
//! plus each subset model's predicted class on those values, and its
//! output is the final affect prediction. Trees split on Gini impurity
//! with bootstrap sampling and per-node feature bagging; every split
//! threshold is a value observed in the training rows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{SampleRecord, StreamId, NUM_CLASSES};
use crate::hashing::derive_seed;
use crate::nn::{ModelParams, NnError};
use crate::streams::{power_set, StreamSubset};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("calibration table has no rows")]
    EmptyTable,
    #[error("row {row} holds {got} columns, schema has {expected}")]
    WidthMismatch { row: usize, expected: usize, got: usize },
    #[error("no model for owned subset {0}")]
    MissingModel(StreamSubset),
    #[error("model for {0} does not match any owned subset")]
    UnexpectedModel(StreamSubset),
    #[error("record {index}: {message}")]
    BadRecord { index: usize, message: String },
    #[error("prediction input schema differs from training schema: {0}")]
    SchemaMismatch(String),
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("malformed forest file: {0}")]
    ParseError(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One forest input column: either a raw stream value or a subset
/// model's predicted class.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColumnKey {
    Feature(StreamId),
    ModelPred(StreamSubset),
}

impl ColumnKey {
    pub fn as_text(&self) -> String {
        match self {
            ColumnKey::Feature(s) => format!("feat:{s}"),
            ColumnKey::ModelPred(s) => format!("model:{}", s.key()),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ForestError> {
        if let Some(name) = text.strip_prefix("feat:") {
            let id = StreamId::new(name)
                .map_err(|e| ForestError::ParseError(format!("bad column {text:?}: {e}")))?;
            Ok(ColumnKey::Feature(id))
        } else if let Some(key) = text.strip_prefix("model:") {
            let subset = StreamSubset::parse_key(key)
                .map_err(|e| ForestError::ParseError(format!("bad column {text:?}: {e}")))?;
            Ok(ColumnKey::ModelPred(subset))
        } else {
            Err(ForestError::ParseError(format!("bad column {text:?}")))
        }
    }
}

impl fmt::Display for ColumnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_text())
    }
}

impl fmt::Debug for ColumnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_text())
    }
}

/// One stacked training row: values for every schema column, plus the
/// true label.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub x: Vec<f64>,
    pub label: u8,
}

/// Rows sharing one column schema.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub schema: Vec<ColumnKey>,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    pub fn validate(&self) -> Result<(), ForestError> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.x.len() != self.schema.len() {
                return Err(ForestError::WidthMismatch {
                    row: i,
                    expected: self.schema.len(),
                    got: r.x.len(),
                });
            }
        }
        Ok(())
    }
}

/// Builds the stacked calibration table for one client: raw features in
/// subset order, then one prediction column per owned subset in
/// power-set order. `models` must hold exactly the power set of
/// `streams`; `window` records must be in `streams` column order.
pub fn build_calibration(
    models: &BTreeMap<StreamSubset, ModelParams>,
    streams: &StreamSubset,
    window: &[SampleRecord],
) -> Result<CalibrationTable, ForestError> {
    let subsets = power_set(streams);
    for s in &subsets {
        if !models.contains_key(s) {
            return Err(ForestError::MissingModel(s.clone()));
        }
    }
    for s in models.keys() {
        if !subsets.contains(s) {
            return Err(ForestError::UnexpectedModel(s.clone()));
        }
    }
    let mut schema: Vec<ColumnKey> =
        streams.members().iter().cloned().map(ColumnKey::Feature).collect();
    schema.extend(subsets.iter().cloned().map(ColumnKey::ModelPred));

    // Column picks per subset, resolved once.
    let projections: Vec<Vec<usize>> = subsets
        .iter()
        .map(|s| {
            s.members()
                .iter()
                .map(|m| streams.index_of(m).expect("power set member is owned"))
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(window.len());
    let mut projected = Vec::new();
    for (index, rec) in window.iter().enumerate() {
        if rec.values.len() != streams.len() {
            return Err(ForestError::BadRecord {
                index,
                message: format!("{} values for {} streams", rec.values.len(), streams.len()),
            });
        }
        let mut x = Vec::with_capacity(schema.len());
        x.extend_from_slice(&rec.values);
        for (subset, cols) in subsets.iter().zip(&projections) {
            projected.clear();
            projected.extend(cols.iter().map(|&c| rec.values[c]));
            let pred = crate::nn::predict_class(&models[subset], &projected)?;
            x.push(pred as f64);
        }
        rows.push(CalibrationRow { x, label: rec.label });
    }
    let table = CalibrationTable { schema, rows };
    table.validate()?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Fraction of columns considered at each split, at least one.
    pub feature_bag_fraction: f64,
    /// Bootstrap-resample rows per tree.
    pub bootstrap: bool,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 32,
            max_depth: 12,
            feature_bag_fraction: 0.6,
            bootstrap: true,
            min_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(ForestError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if !(self.feature_bag_fraction > 0.0 && self.feature_bag_fraction <= 1.0) {
            return Err(ForestError::InvalidConfig(
                "feature_bag_fraction must be in (0, 1]".into(),
            ));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidConfig("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// Decision tree node; nodes live in a flat arena with the root at 0.
#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[col] <= threshold` go left.
    Split { col: usize, threshold: f64, left: usize, right: usize },
    /// Class distribution over the training rows that landed here.
    Leaf { n: usize, dist: Vec<f64> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Leaf distribution for one input row.
    pub fn leaf_dist(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split { col, threshold, left, right } => {
                    i = if x[*col] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { dist, .. } => return dist,
            }
        }
    }

    /// This tree's vote: most probable leaf class, ties to the lowest.
    pub fn vote(&self, x: &[f64]) -> u8 {
        argmax_low(self.leaf_dist(x)) as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub schema: Vec<ColumnKey>,
    pub trees: Vec<Tree>,
    pub warnings: Vec<String>,
}

impl ForestModel {
    /// Majority vote over trees; ties resolve to the lowest class.
    /// `schema` must equal the training schema.
    pub fn predict(&self, schema: &[ColumnKey], x: &[f64]) -> Result<u8, ForestError> {
        if schema != self.schema.as_slice() {
            return Err(ForestError::SchemaMismatch(format!(
                "got [{}]",
                schema.iter().map(|c| c.as_text()).collect::<Vec<_>>().join(", ")
            )));
        }
        self.predict_row(x)
    }

    /// Vote on a row already known to be in schema order.
    pub fn predict_row(&self, x: &[f64]) -> Result<u8, ForestError> {
        if x.len() != self.schema.len() {
            return Err(ForestError::WidthMismatch {
                row: 0,
                expected: self.schema.len(),
                got: x.len(),
            });
        }
        let mut votes = [0usize; NUM_CLASSES];
        for t in &self.trees {
            votes[t.vote(x) as usize] += 1;
        }
        Ok(argmax_low_usize(&votes) as u8)
    }
}

fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn argmax_low_usize(values: &[usize]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn gini(counts: &[usize; NUM_CLASSES], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    table: &'a CalibrationTable,
    cfg: &'a ForestConfig,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, counts: &[usize; NUM_CLASSES], total: usize) -> usize {
        let dist = counts.iter().map(|&c| c as f64 / total as f64).collect();
        self.nodes.push(TreeNode::Leaf { n: total, dist });
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut counts = [0usize; NUM_CLASSES];
        for &r in rows {
            counts[self.table.rows[r].label as usize] += 1;
        }
        let total = rows.len();
        let parent_gini = gini(&counts, total);
        let pure = counts.iter().any(|&c| c == total);
        if pure || depth >= self.cfg.max_depth || total < 2 * self.cfg.min_leaf {
            return self.leaf(&counts, total);
        }

        // Per-node feature bag: distinct columns, sorted for stable
        // evaluation order.
        let n_cols = self.table.schema.len();
        let m = ((self.cfg.feature_bag_fraction * n_cols as f64).ceil() as usize)
            .clamp(1, n_cols);
        let mut cols: Vec<usize> = (0..n_cols).collect();
        for j in 0..m {
            let pick = self.rng.random_range(j..n_cols);
            cols.swap(j, pick);
        }
        let mut bag = cols[..m].to_vec();
        bag.sort_unstable();

        let mut best: Option<(usize, f64, f64)> = None; // (col, threshold, score)
        let mut sorted: Vec<(f64, u8)> = Vec::with_capacity(total);
        for &col in &bag {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| {
                let row = &self.table.rows[r];
                (row.x[col], row.label)
            }));
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
            let mut left_counts = [0usize; NUM_CLASSES];
            for (i, &(v, label)) in sorted.iter().enumerate().take(total - 1) {
                left_counts[label as usize] += 1;
                if v == sorted[i + 1].0 {
                    continue; // not a boundary between distinct values
                }
                let nl = i + 1;
                let nr = total - nl;
                if nl < self.cfg.min_leaf || nr < self.cfg.min_leaf {
                    continue;
                }
                let mut right_counts = [0usize; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    right_counts[c] = counts[c] - left_counts[c];
                }
                let score = (nl as f64 * gini(&left_counts, nl)
                    + nr as f64 * gini(&right_counts, nr))
                    / total as f64;
                if best.map_or(true, |(_, _, s)| score < s) {
                    best = Some((col, v, score));
                }
            }
        }

        let (col, threshold, score) = match best {
            // Splits must actually reduce impurity; all-identical rows
            // with mixed labels become leaves.
            Some(b) if b.2 < parent_gini - 1e-12 => b,
            _ => return self.leaf(&counts, total),
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.table.rows[r].x[col] <= threshold);
        let _ = score;
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Split { col, threshold, left: 0, right: 0 });
        let left = self.grow(&left_rows, depth + 1);
        let right = self.grow(&right_rows, depth + 1);
        if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[node] {
            *l = left;
            *r = right;
        }
        node
    }
}

/// Trains a forest on a calibration table. Per-tree RNGs derive from
/// `cfg.seed`, so the model is a pure function of (table, config).
pub fn train_forest(
    table: &CalibrationTable,
    cfg: &ForestConfig,
) -> Result<ForestModel, ForestError> {
    cfg.validate()?;
    table.validate()?;
    if table.rows.is_empty() {
        return Err(ForestError::EmptyTable);
    }
    let mut warnings = Vec::new();
    let mut seen = [false; NUM_CLASSES];
    for r in &table.rows {
        seen[r.label as usize] = true;
    }
    if seen.iter().filter(|s| **s).count() == 1 {
        warnings.push("calibration rows hold a single class; forest is a constant predictor".into());
    }

    let n = table.rows.len();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tree", t as u64));
        let rows: Vec<usize> = if cfg.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut builder = TreeBuilder { table, cfg, rng, nodes: Vec::new() };
        let root = builder.grow(&rows, 0);
        debug_assert_eq!(root, 0);
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(ForestModel { schema: table.schema.clone(), trees, warnings })
}

/// Text serialization of a forest. Floats print in shortest round-trip
/// form, so parse(write(f)) == f exactly.
pub fn forest_to_string(forest: &ForestModel) -> String {
    let mut out = format!(
        "forest v1 trees={} columns={}\n",
        forest.trees.len(),
        forest.schema.len()
    );
    for c in &forest.schema {
        out.push_str(&format!("col {}\n", c.as_text()));
    }
    for t in &forest.trees {
        out.push_str(&format!("tree nodes={}\n", t.nodes.len()));
        for node in &t.nodes {
            match node {
                TreeNode::Split { col, threshold, left, right } => {
                    out.push_str(&format!("split {col} {threshold} {left} {right}\n"));
                }
                TreeNode::Leaf { n, dist } => {
                    let d: Vec<String> = dist.iter().map(|v| format!("{v}")).collect();
                    out.push_str(&format!("leaf {n} {}\n", d.join(",")));
                }
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn write_forest(path: &Path, forest: &ForestModel) -> Result<(), ForestError> {
    std::fs::write(path, forest_to_string(forest))
        .map_err(|e| ForestError::ParseError(format!("write failed: {e}")))
}

pub fn parse_forest(text: &str) -> Result<ForestModel, ForestError> {
    let err = |msg: String| ForestError::ParseError(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty input".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != "forest" || fields[1] != "v1" {
        return Err(err(format!("bad header {header:?}")));
    }
    let num = |f: &str, what: &str| -> Result<usize, ForestError> {
        f.split('=')
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(format!("bad {what} in header")))
    };
    let n_trees = num(fields[2], "tree count")?;
    let n_cols = num(fields[3], "column count")?;

    let mut schema = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let line = lines.next().ok_or_else(|| err("truncated schema".into()))?;
        let name = line.strip_prefix("col ").ok_or_else(|| err(format!("expected col line, got {line:?}")))?;
        schema.push(ColumnKey::parse(name)?);
    }

    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let line = lines.next().ok_or_else(|| err("truncated trees".into()))?;
        let n_nodes = line
            .strip_prefix("tree nodes=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| err(format!("expected tree line, got {line:?}")))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines.next().ok_or_else(|| err("truncated nodes".into()))?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["split", col, threshold, left, right] => {
                    let node = TreeNode::Split {
                        col: col.parse().map_err(|_| err(format!("bad split col {col:?}")))?,
                        threshold: threshold
                            .parse()
                            .map_err(|_| err(format!("bad threshold {threshold:?}")))?,
                        left: left.parse().map_err(|_| err(format!("bad left {left:?}")))?,
                        right: right.parse().map_err(|_| err(format!("bad right {right:?}")))?,
                    };
                    nodes.push(node);
                }
                ["leaf", n, dist] => {
                    let n = n.parse().map_err(|_| err(format!("bad leaf count {n:?}")))?;
                    let dist: Vec<f64> = dist
                        .split(',')
                        .map(|v| v.parse().map_err(|_| err(format!("bad leaf weight {v:?}"))))
                        .collect::<Result<_, _>>()?;
                    if dist.len() != NUM_CLASSES {
                        return Err(err(format!("leaf holds {} weights", dist.len())));
                    }
                    nodes.push(TreeNode::Leaf { n, dist });
                }
                _ => return Err(err(format!("unrecognized node line {line:?}"))),
            }
        }
        // Structural sanity: child indices in range.
        for node in &nodes {
            if let TreeNode::Split { left, right, .. } = node {
                if *left >= nodes.len() || *right >= nodes.len() {
                    return Err(err("split child out of range".into()));
                }
            }
        }
        trees.push(Tree { nodes });
    }
    match lines.next() {
        Some("end") => {}
        other => return Err(err(format!("expected end marker, got {other:?}"))),
    }
    Ok(ForestModel { schema, trees, warnings: Vec::new() })
}

pub fn read_forest(path: &Path) -> Result<ForestModel, ForestError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ForestError::ParseError(format!("read failed: {e}")))?;
    parse_forest(&text)
}

/// Human-readable rendering of selected trees, for inspection.
pub fn render_forest(forest: &ForestModel, max_trees: usize) -> String {
    let mut out = String::new();
    for (i, t) in forest.trees.iter().take(max_trees).enumerate() {
        out.push_str(&format!("tree {i}:\n"));
        render_node(forest, t, 0, 1, &mut out);
    }
    if forest.trees.len() > max_trees {
        out.push_str(&format!("... {} more trees\n", forest.trees.len() - max_trees));
    }
    out
}

fn render_node(forest: &ForestModel, tree: &Tree, node: usize, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match &tree.nodes[node] {
        TreeNode::Split { col, threshold, left, right } => {
            out.push_str(&format!("{pad}[{} <= {threshold}]\n", forest.schema[*col]));
            render_node(forest, tree, *left, indent + 1, out);
            out.push_str(&format!("{pad}else\n"));
            render_node(forest, tree, *right, indent + 1, out);
        }
        TreeNode::Leaf { n, dist } => {
            out.push_str(&format!("{pad}leaf class={} n={n}\n", argmax_low(dist)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, NetShape};

    fn subset(key: &str) -> StreamSubset {
        StreamSubset::parse_key(key).unwrap()
    }

    /// Bias-only model that always predicts `class`.
    fn constant_model(input_dim: usize, class: u8) -> ModelParams {
        let shape = NetShape::new(input_dim, vec![]).unwrap();
        let mut p = init_params(&shape, 0);
        for v in &mut p.theta {
            *v = 0.0;
        }
        let bias_off = input_dim * NUM_CLASSES;
        p.theta[bias_off + class as usize] = 50.0;
        p
    }

    fn simple_table(n: usize, cols: usize, seed: u64) -> CalibrationTable {
        // Label depends on column 0 via thresholds; other columns are noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = (0..cols)
            .map(|i| ColumnKey::Feature(StreamId::new(format!("S{i}")).unwrap()))
            .collect();
        let rows = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..1.0);
                let label = if v < 0.3 {
                    1u8
                } else if v < 0.7 {
                    4
                } else {
                    9
                };
                let mut x = vec![v];
                for _ in 1..cols {
                    x.push(rng.random_range(-1.0..1.0));
                }
                (x, label)
            })
            .map(|(x, label)| CalibrationRow { x, label })
            .collect();
        CalibrationTable { schema, rows }
    }

    #[test]
    fn calibration_schema_covers_features_and_models() {
        let streams = subset("ECG+EDA+ST");
        let mut models = BTreeMap::new();
        for (i, s) in power_set(&streams).into_iter().enumerate() {
            models.insert(s.clone(), constant_model(s.len(), i as u8));
        }
        let window: Vec<SampleRecord> = (0..5)
            .map(|t| SampleRecord {
                timestamp: t,
                values: vec![0.1 * t as f64, -0.5, 2.0],
                label: (t % 11) as u8,
            })
            .collect();
        let table = build_calibration(&models, &streams, &window).unwrap();
        // 3 raw features + 7 subset-model predictions.
        assert_eq!(table.schema.len(), 10);
        let names: Vec<String> = table.schema.iter().map(|c| c.as_text()).collect();
        assert_eq!(
            names,
            [
                "feat:ECG", "feat:EDA", "feat:ST", "model:ECG", "model:EDA", "model:ST",
                "model:ECG+EDA", "model:ECG+ST", "model:EDA+ST", "model:ECG+EDA+ST"
            ]
        );
        for (i, row) in table.rows.iter().enumerate() {
            assert_eq!(&row.x[..3], &window[i].values[..]);
            // Constant model k always predicts k.
            for (k, v) in row.x[3..].iter().enumerate() {
                assert_eq!(*v, k as f64);
            }
        }
    }

    #[test]
    fn calibration_rejects_wrong_model_sets() {
        let streams = subset("ECG+EDA");
        let window = vec![SampleRecord { timestamp: 0, values: vec![0.0, 0.0], label: 0 }];
        let mut models = BTreeMap::new();
        models.insert(subset("ECG"), constant_model(1, 0));
        assert!(matches!(
            build_calibration(&models, &streams, &window),
            Err(ForestError::MissingModel(_))
        ));
        for s in power_set(&streams) {
            models.insert(s.clone(), constant_model(s.len(), 0));
        }
        models.insert(subset("ST"), constant_model(1, 0));
        assert!(matches!(
            build_calibration(&models, &streams, &window),
            Err(ForestError::UnexpectedModel(_))
        ));
    }

    #[test]
    fn forest_fits_threshold_structure() {
        let table = simple_table(300, 3, 1);
        let forest = train_forest(&table, &ForestConfig::default()).unwrap();
        let mut hits = 0;
        for r in &table.rows {
            if forest.predict_row(&r.x).unwrap() == r.label {
                hits += 1;
            }
        }
        let acc = hits as f64 / table.rows.len() as f64;
        assert!(acc > 0.97, "training accuracy {acc}");
    }

    #[test]
    fn split_thresholds_are_observed_values() {
        let table = simple_table(120, 4, 7);
        let forest = train_forest(&table, &ForestConfig::default()).unwrap();
        for tree in &forest.trees {
            for node in &tree.nodes {
                if let TreeNode::Split { col, threshold, .. } = node {
                    let seen = table.rows.iter().any(|r| r.x[*col] == *threshold);
                    assert!(seen, "threshold {threshold} not observed in column {col}");
                }
            }
        }
    }

    #[test]
    fn best_split_matches_exhaustive_search() {
        // Single tree, no bootstrap, all features: the root split must
        // equal the global Gini minimizer found by brute force.
        let table = simple_table(80, 2, 3);
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            feature_bag_fraction: 1.0,
            ..ForestConfig::default()
        };
        let forest = train_forest(&table, &cfg).unwrap();
        let (root_col, root_thr) = match forest.trees[0].nodes[0] {
            TreeNode::Split { col, threshold, .. } => (col, threshold),
            _ => panic!("root is a leaf"),
        };

        // Oracle: try every (col, observed value) pair.
        let n = table.rows.len();
        let mut best = f64::INFINITY;
        let mut best_pair = (0usize, 0.0f64);
        for col in 0..2 {
            for r in &table.rows {
                let thr = r.x[col];
                let mut lc = [0usize; NUM_CLASSES];
                let mut rc = [0usize; NUM_CLASSES];
                let (mut nl, mut nr) = (0, 0);
                for q in &table.rows {
                    if q.x[col] <= thr {
                        lc[q.label as usize] += 1;
                        nl += 1;
                    } else {
                        rc[q.label as usize] += 1;
                        nr += 1;
                    }
                }
                if nl == 0 || nr == 0 {
                    continue;
                }
                let score =
                    (nl as f64 * gini(&lc, nl) + nr as f64 * gini(&rc, nr)) / n as f64;
                if score < best {
                    best = score;
                    best_pair = (col, thr);
                }
            }
        }
        assert_eq!(root_col, best_pair.0);
        // Any threshold with the same score is acceptable; compare scores.
        let score_of = |col: usize, thr: f64| {
            let mut lc = [0usize; NUM_CLASSES];
            let mut rc = [0usize; NUM_CLASSES];
            let (mut nl, mut nr) = (0, 0);
            for q in &table.rows {
                if q.x[col] <= thr {
                    lc[q.label as usize] += 1;
                    nl += 1;
                } else {
                    rc[q.label as usize] += 1;
                    nr += 1;
                }
            }
            (nl as f64 * gini(&lc, nl) + nr as f64 * gini(&rc, nr)) / n as f64
        };
        assert!((score_of(root_col, root_thr) - best).abs() < 1e-12);
    }

    #[test]
    fn leaf_distributions_are_normalized() {
        let table = simple_table(150, 3, 5);
        let forest = train_forest(&table, &ForestConfig::default()).unwrap();
        for tree in &forest.trees {
            for node in &tree.nodes {
                if let TreeNode::Leaf { n, dist } = node {
                    assert!(*n > 0);
                    let sum: f64 = dist.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-9, "leaf sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn single_class_table_gives_constant_predictor_with_warning() {
        let mut table = simple_table(40, 2, 2);
        for r in &mut table.rows {
            r.label = 6;
        }
        let forest = train_forest(&table, &ForestConfig::default()).unwrap();
        assert!(!forest.warnings.is_empty());
        for r in &table.rows {
            assert_eq!(forest.predict_row(&r.x).unwrap(), 6);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let table = simple_table(100, 3, 9);
        let cfg = ForestConfig::default();
        let a = train_forest(&table, &cfg).unwrap();
        let b = train_forest(&table, &cfg).unwrap();
        assert_eq!(a.trees, b.trees);
        let c = train_forest(&table, &ForestConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.trees, c.trees);
    }

    #[test]
    fn vote_ties_resolve_to_lowest_class() {
        let schema = vec![ColumnKey::Feature(StreamId::new("A").unwrap())];
        let leaf = |class: usize| {
            let mut dist = vec![0.0; NUM_CLASSES];
            dist[class] = 1.0;
            Tree { nodes: vec![TreeNode::Leaf { n: 1, dist }] }
        };
        let forest = ForestModel {
            schema,
            // Two votes for 7, two for 3: tie resolves to 3.
            trees: vec![leaf(7), leaf(3), leaf(7), leaf(3)],
            warnings: vec![],
        };
        assert_eq!(forest.predict_row(&[0.0]).unwrap(), 3);
    }

    #[test]
    fn predict_rejects_schema_mismatch() {
        let table = simple_table(30, 2, 4);
        let forest = train_forest(&table, &ForestConfig::default()).unwrap();
        let wrong = vec![
            ColumnKey::Feature(StreamId::new("S1").unwrap()),
            ColumnKey::Feature(StreamId::new("S0").unwrap()),
        ];
        assert!(matches!(
            forest.predict(&wrong, &[0.0, 0.0]),
            Err(ForestError::SchemaMismatch(_))
        ));
        assert!(forest.predict(&table.schema, &[0.5, 0.5]).is_ok());
        assert!(forest.predict_row(&[0.5]).is_err());
    }

    #[test]
    fn forest_text_round_trips() {
        let streams = subset("ECG+EDA");
        let mut models = BTreeMap::new();
        for (i, s) in power_set(&streams).into_iter().enumerate() {
            models.insert(s.clone(), constant_model(s.len(), i as u8));
        }
        let window: Vec<SampleRecord> = (0..40)
            .map(|t| SampleRecord {
                timestamp: t,
                values: vec![(t % 7) as f64 * 0.31, (t % 5) as f64 * -0.17],
                label: (t % 11) as u8,
            })
            .collect();
        let table = build_calibration(&models, &streams, &window).unwrap();
        let forest = train_forest(&table, &ForestConfig { n_trees: 5, ..ForestConfig::default() }).unwrap();
        let text = forest_to_string(&forest);
        let back = parse_forest(&text).unwrap();
        assert_eq!(back.schema, forest.schema);
        assert_eq!(back.trees, forest.trees);
        assert_eq!(forest_to_string(&back), text);
    }

    #[test]
    fn forest_parser_rejects_corruption() {
        let table = simple_table(20, 2, 8);
        let forest = train_forest(&table, &ForestConfig { n_trees: 2, ..ForestConfig::default() }).unwrap();
        let text = forest_to_string(&forest);
        assert!(parse_forest(&text.replace("forest v1", "forest v9")).is_err());
        assert!(parse_forest(text.trim_end_matches("end\n")).is_err());
        assert!(parse_forest(&text.replace("leaf ", "laef ")).is_err());
    }

    #[test]
    fn render_shows_split_columns() {
        let table = simple_table(60, 2, 6);
        let forest = train_forest(&table, &ForestConfig { n_trees: 3, ..ForestConfig::default() }).unwrap();
        let text = render_forest(&forest, 2);
        assert!(text.contains("tree 0:"));
        assert!(text.contains("leaf class="));
        assert!(text.contains("more trees"));
    }
}
