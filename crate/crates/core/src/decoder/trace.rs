use std::time::Duration;

use serde::Serialize;

use crate::backend::{DocId, TokenId};
use crate::error::Result;

/// What happened at one generated token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: TokenId,
    /// Documents still active after this step's update and pruning, ascending id.
    pub active: Vec<DocId>,
    /// Posterior after the update and pruning, in input order, as probabilities.
    pub posterior: Vec<f64>,
    #[serde(skip)]
    pub log_posterior: Vec<f64>,
    /// Document-conditioned distributions computed for this token.
    pub tokens_scored: usize,
    /// Query-and-context positions attended to by the scored token, summed over branches.
    pub attention_pairs: u64,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Per-decode record of posteriors, pruning and costs.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DecodeTrace {
    pub doc_ids: Vec<DocId>,
    /// Prior over the documents, in input order, as probabilities.
    pub prior: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Attention pairs to encode every branch's context once.
    pub prefill_pairs: u64,
    /// Whether the prior alone would already have deflected.
    pub prior_deflection: Option<bool>,
    #[serde(skip)]
    pub prefill_elapsed: Duration,
}

#[derive(Serialize)]
struct StepLine<'a> {
    item: &'a str,
    #[serde(flatten)]
    step: &'a StepRecord,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Time to first token: prefill plus the first decoding step.
    pub fn time_to_first_token(&self) -> Duration {
        self.prefill_elapsed + self.steps.first().map_or(Duration::ZERO, |s| s.elapsed)
    }

    /// Mean time per token after the first, `None` for single-token decodes.
    pub fn time_per_output_token(&self) -> Option<Duration> {
        let rest = self.steps.get(1..).filter(|r| !r.is_empty())?;
        Some(rest.iter().map(|s| s.elapsed).sum::<Duration>() / rest.len() as u32)
    }

    /// Mean number of documents scored per generated token.
    pub fn mean_active(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.tokens_scored as f64).sum::<f64>() / self.steps.len() as f64
    }

    pub fn decode_pairs(&self) -> u64 {
        self.steps.iter().map(|s| s.attention_pairs).sum()
    }

    /// One JSON object per step, each tagged with `item`.
    pub fn to_jsonl(&self, item: &str) -> Result<String> {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(&StepLine { item, step })?);
            out.push('\n');
        }
        Ok(out)
    }
}
