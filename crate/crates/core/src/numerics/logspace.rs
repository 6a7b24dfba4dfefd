//! Log-space probability primitives.

use crate::error::{usage, BeragError, Result};

/// Tolerance on `logsumexp(values) == 0` for a [`LogDistribution`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Slack allowed above zero for individual log-probabilities.
pub const ENTRY_SLACK: f64 = 1e-12;

/// `log Σ exp(v_i)` with max-shift stabilisation, summed in slice order.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub(crate) fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Stable `log Σ exp(v_i)`.
///
/// `-inf` entries are legal and contribute zero mass; the result is `-inf`
/// exactly when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(usage("log_sum_exp of an empty vector"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(usage("log_sum_exp input contains NaN"));
    }
    Ok(lse(values))
}

/// Softmax in log space: `out[i] = logits[i] - log_sum_exp(logits)`.
pub fn normalize_logits(logits: &[f64]) -> Result<LogDistribution> {
    if logits.is_empty() {
        return Err(usage("cannot normalize an empty logit vector"));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(usage("logits must be finite or -inf"));
    }
    let z = lse(logits);
    if z == f64::NEG_INFINITY {
        return Err(BeragError::Degenerate(logits.len()));
    }
    Ok(LogDistribution {
        values: logits.iter().map(|v| v - z).collect(),
    })
}

/// A normalized vector of natural-log probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDistribution {
    values: Vec<f64>,
}

impl LogDistribution {
    /// Wraps `values`, checking they already form a distribution.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(usage("empty distribution"));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v > ENTRY_SLACK) {
            return Err(usage(format!("invalid log-probability {v}")));
        }
        let z = lse(&values);
        if z == f64::NEG_INFINITY {
            return Err(BeragError::Degenerate(values.len()));
        }
        if z.abs() > NORMALIZATION_TOL {
            return Err(usage(format!("log-probabilities not normalized (logsumexp = {z:e})")));
        }
        Ok(Self { values })
    }

    /// Uniform distribution over `size` outcomes.
    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(usage("uniform distribution over zero outcomes"));
        }
        Ok(Self {
            values: vec![-(size as f64).ln(); size],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values.get(i).copied()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.exp()).collect()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate().skip(1) {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
