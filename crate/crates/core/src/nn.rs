//! Small dense softmax classifier, trained from scratch.
//!
//! Parameters live in one flat `Vec<f64>` laid out layer by layer,
//! weights before biases, so federated averaging and serialization can
//! treat models as plain vectors. Weights within a layer are row-major
//! by output neuron. Hidden layers use ReLU, the output layer softmax,
//! and the loss is sparse categorical cross-entropy with the predicted
//! probability floored at 1e-12.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::NUM_CLASSES;

const PROB_FLOOR: f64 = 1e-12;

/// One labeled feature row.
pub type Row = (Vec<f64>, u8);

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("expected {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector holds {got} values, shape needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {0} out of range")]
    InvalidLabel(u8),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed params file: {0}")]
    ParseError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Network architecture: input width, hidden widths, output width.
/// Output width is the number of affect classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl NetShape {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self, NnError> {
        let shape = NetShape { input_dim, hidden, output_dim: NUM_CLASSES };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidShape("input_dim must be >= 1".into()));
        }
        if self.output_dim == 0 {
            return Err(NnError::InvalidShape("output_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|w| *w == 0) {
            return Err(NnError::InvalidShape("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths including input and output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }

    /// Total parameter count: sum over layers of `(fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Flat parameter vector tied to its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: NetShape,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), NnError> {
        self.shape.validate()?;
        let expected = self.shape.param_count();
        if self.theta.len() != expected {
            return Err(NnError::ParamCount { expected, got: self.theta.len() });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Uniform init scaled by fan-in, biases zero. Everything derives from
/// `seed`, so cohort members can share an initialization by sharing a
/// seed.
pub fn init_params(shape: &NetShape, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(shape.param_count());
    for w in shape.dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            theta.push(rng.random_range(-bound..bound));
        }
        theta.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ModelParams { shape: shape.clone(), theta }
}

/// Per-layer view into the flat vector: (weight offset, bias offset,
/// fan_in, fan_out).
fn layer_offsets(shape: &NetShape) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut off = 0;
    for w in shape.dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        out.push((off, off + fan_in * fan_out, fan_in, fan_out));
        off += (fan_in + 1) * fan_out;
    }
    out
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Activation buffers reused across samples; `acts[0]` is the input,
/// `acts[L]` the softmax output.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(shape: &NetShape) -> Self {
        let dims = shape.dims();
        Workspace {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    fn forward(&mut self, params: &ModelParams, x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let layers = layer_offsets(&params.shape);
        let last = layers.len() - 1;
        for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let (prev, rest) = self.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            for o in 0..fan_out {
                let row = &params.theta[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut z = params.theta[b_off + o];
                for (w, a) in row.iter().zip(input.iter()) {
                    z += w * a;
                }
                out[o] = if l < last { z.max(0.0) } else { z };
            }
            if l == last {
                softmax_in_place(out);
            }
        }
    }

    /// Adds this sample's gradient (already scaled by `scale`) into
    /// `grad`. Must be called right after `forward` on the same sample.
    fn accumulate_grad(&mut self, params: &ModelParams, label: u8, scale: f64, grad: &mut [f64]) {
        let layers = layer_offsets(&params.shape);
        let last = layers.len() - 1;
        // Output delta: (p - onehot) * scale.
        {
            let p = &self.acts[last + 1];
            let d = &mut self.deltas[last];
            for (dv, pv) in d.iter_mut().zip(p.iter()) {
                *dv = pv * scale;
            }
            d[label as usize] -= scale;
        }
        for l in (0..layers.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = layers[l];
            let (lower, upper) = self.deltas.split_at_mut(l);
            let delta = &upper[0];
            let input = &self.acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let g_row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (g, a) in g_row.iter_mut().zip(input.iter()) {
                        *g += d * a;
                    }
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                // Backpropagate through the ReLU of the previous layer.
                let prev_delta = &mut lower[l - 1];
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    if input[i] > 0.0 {
                        let mut s = 0.0;
                        for o in 0..fan_out {
                            s += params.theta[w_off + o * fan_in + i] * delta[o];
                        }
                        *pd = s;
                    } else {
                        *pd = 0.0;
                    }
                }
            }
        }
    }
}

fn check_rows(params: &ModelParams, rows: &[Row]) -> Result<(), NnError> {
    if rows.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    for (x, y) in rows {
        if x.len() != params.shape.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: params.shape.input_dim,
                got: x.len(),
            });
        }
        if *y as usize >= params.shape.output_dim {
            return Err(NnError::InvalidLabel(*y));
        }
    }
    Ok(())
}

/// Class probabilities for one input.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, NnError> {
    params.validate()?;
    if x.len() != params.shape.input_dim {
        return Err(NnError::DimensionMismatch { expected: params.shape.input_dim, got: x.len() });
    }
    let mut ws = Workspace::new(&params.shape);
    ws.forward(params, x);
    Ok(ws.acts.last().expect("network has layers").clone())
}

/// Most probable class; ties resolve to the lowest index.
pub fn predict_class(params: &ModelParams, x: &[f64]) -> Result<u8, NnError> {
    let p = forward(params, x)?;
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    Ok(best as u8)
}

/// Mean sparse categorical cross-entropy over a batch.
pub fn loss(params: &ModelParams, rows: &[Row]) -> Result<f64, NnError> {
    params.validate()?;
    check_rows(params, rows)?;
    let mut ws = Workspace::new(&params.shape);
    let mut total = 0.0;
    for (x, y) in rows {
        ws.forward(params, x);
        let p = ws.acts.last().expect("network has layers")[*y as usize];
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / rows.len() as f64)
}

/// Analytic gradient of [`loss`] with respect to the flat parameters.
pub fn grad(params: &ModelParams, rows: &[Row]) -> Result<Vec<f64>, NnError> {
    params.validate()?;
    check_rows(params, rows)?;
    let mut ws = Workspace::new(&params.shape);
    let mut g = vec![0.0; params.theta.len()];
    let scale = 1.0 / rows.len() as f64;
    for (x, y) in rows {
        ws.forward(params, x);
        ws.accumulate_grad(params, *y, scale, &mut g);
    }
    Ok(g)
}

/// Central-difference gradient of [`loss`], the reference oracle for the
/// analytic gradient. Costs `2 * param_count` loss evaluations; use
/// small nets.
pub fn finite_difference_gradient(
    params: &ModelParams,
    rows: &[Row],
    h: f64,
) -> Result<Vec<f64>, NnError> {
    let mut probe = params.clone();
    let mut g = vec![0.0; params.theta.len()];
    for j in 0..params.theta.len() {
        let orig = probe.theta[j];
        probe.theta[j] = orig + h;
        let up = loss(&probe, rows)?;
        probe.theta[j] = orig - h;
        let down = loss(&probe, rows)?;
        probe.theta[j] = orig;
        g[j] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(params: &ModelParams, rows: &[Row]) -> Result<f64, NnError> {
    params.validate()?;
    check_rows(params, rows)?;
    let mut ws = Workspace::new(&params.shape);
    let mut hits = 0usize;
    for (x, y) in rows {
        ws.forward(params, x);
        let p = ws.acts.last().expect("network has layers");
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        if best == *y as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Mini-batch SGD settings. Plateau handling follows the usual recipe:
/// no validation improvement for `lr_reduce_patience` epochs lowers the
/// learning rate by `lr_reduce_factor`, none for `early_stop_patience`
/// epochs stops training, and the best-validation parameters are what
/// you get back.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    pub early_stop_patience: usize,
    /// Fraction of rows held out for validation; 0 validates on the
    /// training rows themselves.
    pub val_fraction: f64,
    /// Drives the train/validation split and batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 107,
            batch_size: 16,
            learning_rate: 0.25,
            lr_reduce_factor: 0.1,
            lr_reduce_patience: 5,
            early_stop_patience: 10,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor <= 1.0) {
            return Err(NnError::InvalidConfig("lr_reduce_factor must be in (0, 1]".into()));
        }
        if self.lr_reduce_patience == 0 || self.early_stop_patience == 0 {
            return Err(NnError::InvalidConfig("patience values must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(NnError::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One epoch of history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Trains from a fresh fan-in-scaled initialization seeded by
/// `cfg.seed`.
pub fn train(
    rows: &[Row],
    shape: &NetShape,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), NnError> {
    train_from(init_params(shape, cfg.seed), rows, cfg)
}

/// Trains starting from `init`; federated rounds continue from the
/// latest averaged parameters this way. Returns the parameters that
/// scored best on validation, falling back to `init` when nothing
/// improves (e.g. `max_epochs` 0).
pub fn train_from(
    init: ModelParams,
    rows: &[Row],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), NnError> {
    init.validate()?;
    cfg.validate()?;
    check_rows(&init, rows)?;

    let mut history = TrainHistory::default();
    let mut classes_seen = [false; NUM_CLASSES];
    for (_, y) in rows {
        classes_seen[*y as usize] = true;
    }
    if classes_seen.iter().filter(|c| **c).count() == 1 {
        history
            .warnings
            .push("training data holds a single class; model degenerates to a constant".into());
    }

    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut rng);
    let mut n_val = ((n as f64 * cfg.val_fraction) + 0.5).floor() as usize;
    if n_val >= n {
        n_val = n - 1;
    }
    let (train_idx, val_idx) = idx.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    let val_rows: Vec<Row> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| rows[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| rows[i].clone()).collect()
    };

    let mut params = init.clone();
    let mut best_theta = init.theta.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut lr = cfg.learning_rate;
    let mut stale_stop = 0usize;
    let mut stale_lr = 0usize;
    let mut ws = Workspace::new(&params.shape);
    let mut grad_buf = vec![0.0; params.theta.len()];

    for epoch in 0..cfg.max_epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            grad_buf.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (x, y) = &rows[i];
                ws.forward(&params, x);
                let p = ws.acts.last().expect("network has layers")[*y as usize];
                batch_loss -= p.max(PROB_FLOOR).ln();
                ws.accumulate_grad(&params, *y, scale, &mut grad_buf);
            }
            epoch_loss += batch_loss;
            for (t, g) in params.theta.iter_mut().zip(&grad_buf) {
                *t -= lr * g;
            }
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        if !train_loss.is_finite() {
            history.warnings.push(format!(
                "training diverged at epoch {epoch}; keeping best parameters so far"
            ));
            break;
        }
        let val_accuracy = accuracy_with_ws(&params, &val_rows, &mut ws);
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_theta.copy_from_slice(&params.theta);
            stale_stop = 0;
            stale_lr = 0;
        } else {
            stale_stop += 1;
            stale_lr += 1;
        }
        history.epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss,
            val_accuracy,
            best_val_accuracy: best_acc,
        });
        if stale_stop >= cfg.early_stop_patience {
            history.stopped_early = true;
            break;
        }
        if stale_lr >= cfg.lr_reduce_patience {
            lr *= cfg.lr_reduce_factor;
            stale_lr = 0;
        }
    }

    Ok((ModelParams { shape: init.shape, theta: best_theta }, history))
}

fn accuracy_with_ws(params: &ModelParams, rows: &[Row], ws: &mut Workspace) -> f64 {
    let mut hits = 0usize;
    for (x, y) in rows {
        ws.forward(params, x);
        let p = ws.acts.last().expect("network has layers");
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        if best == *y as usize {
            hits += 1;
        }
    }
    hits as f64 / rows.len() as f64
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for j in (1..idx.len()).rev() {
        let pick = rng.random_range(0..=j);
        idx.swap(j, pick);
    }
}

fn hidden_field(hidden: &[usize]) -> String {
    if hidden.is_empty() {
        "-".to_string()
    } else {
        hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Canonical byte serialization: a one-line text header naming the
/// subset key and shape, then the parameters as little-endian f64. The
/// same bytes feed ledger payload digests.
pub fn params_bytes(subset_key: &str, params: &ModelParams) -> Vec<u8> {
    let header = format!(
        "params {} {} {} {} {}\n",
        subset_key,
        params.shape.input_dim,
        hidden_field(&params.shape.hidden),
        params.shape.output_dim,
        params.theta.len()
    );
    let mut out = Vec::with_capacity(header.len() + params.theta.len() * 8);
    out.extend_from_slice(header.as_bytes());
    for v in &params.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes [`params_bytes`] to a file.
pub fn write_params(path: &Path, subset_key: &str, params: &ModelParams) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&params_bytes(subset_key, params))?;
    Ok(())
}

/// Inverse of [`params_bytes`]; the round trip is bit-exact.
pub fn read_params_bytes(bytes: &[u8]) -> Result<(String, ModelParams), NnError> {
    let mut reader = bytes;
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
    if fields.len() != 6 || fields[0] != "params" {
        return Err(NnError::ParseError(format!("bad header {header:?}")));
    }
    let subset_key = fields[1].to_string();
    let parse_dim = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| NnError::ParseError(format!("bad {what} {s:?}")))
    };
    let input_dim = parse_dim(fields[2], "input dim")?;
    let hidden = if fields[3] == "-" {
        Vec::new()
    } else {
        fields[3]
            .split(',')
            .map(|s| parse_dim(s, "hidden width"))
            .collect::<Result<Vec<_>, _>>()?
    };
    let output_dim = parse_dim(fields[4], "output dim")?;
    let count = parse_dim(fields[5], "parameter count")?;
    let shape = NetShape { input_dim, hidden, output_dim };
    shape.validate().map_err(|e| NnError::ParseError(e.to_string()))?;
    if shape.param_count() != count {
        return Err(NnError::ParseError(format!(
            "header count {count} does not match shape ({})",
            shape.param_count()
        )));
    }
    if reader.len() != count * 8 {
        return Err(NnError::ParseError(format!(
            "expected {} payload bytes, got {}",
            count * 8,
            reader.len()
        )));
    }
    let theta = reader
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    let params = ModelParams { shape, theta };
    params.validate().map_err(|e| NnError::ParseError(e.to_string()))?;
    Ok((subset_key, params))
}

/// Reads a params file written by [`write_params`].
pub fn read_params(path: &Path) -> Result<(String, ModelParams), NnError> {
    let bytes = std::fs::read(path)?;
    read_params_bytes(&bytes)
}
