//! Federated parameter averaging.
//!
//! The aggregate is the sample-count-weighted mean of the contributed
//! parameter vectors. It is computed as a running weighted mean,
//! `m += (w_i / W) * (x_i - m)`, rather than sum-then-divide: that form
//! returns k identical contributions bit-exactly unchanged, which keeps
//! repeated-aggregation invariants exact instead of merely close.

use thiserror::Error;

use crate::nn::ModelParams;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no contributions to aggregate")]
    Empty,
    #[error("contribution {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { index: usize, expected: String, got: String },
    #[error("contribution {index} has a zero sample count")]
    ZeroWeight { index: usize },
    #[error("contribution {index} holds non-finite parameters")]
    NonFinite { index: usize },
}

/// One client's contribution: parameters plus the training sample count
/// that weights them.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedParams {
    pub params: ModelParams,
    pub n_samples: u64,
}

/// How contributions are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AggregationRule {
    /// Weight by training sample count.
    #[default]
    SampleWeighted,
    /// Every contribution counts equally.
    Unweighted,
}

/// Sample-weighted federated average. Contributions are folded in input
/// order; callers that need a canonical result (ledger replay does) must
/// pass a canonically ordered slice.
pub fn fed_average(contributions: &[WeightedParams]) -> Result<ModelParams, AggregateError> {
    fed_average_with(AggregationRule::SampleWeighted, contributions)
}

/// [`fed_average`] with an explicit weighting rule.
pub fn fed_average_with(
    rule: AggregationRule,
    contributions: &[WeightedParams],
) -> Result<ModelParams, AggregateError> {
    let first = contributions.first().ok_or(AggregateError::Empty)?;
    for (index, c) in contributions.iter().enumerate() {
        if c.params.shape != first.params.shape {
            return Err(AggregateError::ShapeMismatch {
                index,
                expected: format!("{:?}", first.params.shape),
                got: format!("{:?}", c.params.shape),
            });
        }
        if c.n_samples == 0 {
            return Err(AggregateError::ZeroWeight { index });
        }
        if !c.params.all_finite() {
            return Err(AggregateError::NonFinite { index });
        }
    }

    let mut mean = first.params.theta.clone();
    let mut total = weight_of(rule, first) as f64;
    for c in &contributions[1..] {
        let w = weight_of(rule, c) as f64;
        total += w;
        let t = w / total;
        for (m, x) in mean.iter_mut().zip(&c.params.theta) {
            *m += t * (x - *m);
        }
    }
    Ok(ModelParams { shape: first.params.shape.clone(), theta: mean })
}

fn weight_of(rule: AggregationRule, c: &WeightedParams) -> u64 {
    match rule {
        AggregationRule::SampleWeighted => c.n_samples,
        AggregationRule::Unweighted => 1,
    }
}
