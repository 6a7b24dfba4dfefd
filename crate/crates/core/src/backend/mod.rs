//! Document-conditioned scorers and the document prior head.
//!
//! A [`ScorerBackend`] answers two questions for a `(query, document)` pair:
//! what is the next-token distribution given an answer prefix, and what is
//! the summary embedding the prior head scores. Two realisations ship with
//! the crate: [`OracleBackend`], which reads facts off an answer key, and
//! [`TinyBackend`], a small trainable model.

mod checkpoint;
mod oracle;
mod prior;
mod tiny;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::numerics::{lse, LogDistribution, Parameter, Tape, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use oracle::{OracleBackend, ORACLE_FEATURES};
pub use prior::{prior_distribution, prior_logits, PriorHead};
pub use tiny::{TinyBackend, TinyConfig};

pub type TokenId = u32;
pub type DocId = u64;

/// Reserved id of the empty passage.
pub const NULL_DOC_ID: DocId = 0;

/// A retrieved passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub tokens: Vec<TokenId>,
    #[serde(default)]
    pub is_null: bool,
    #[serde(default)]
    pub relevance: Option<u8>,
}

impl Document {
    pub fn new(doc_id: DocId, tokens: Vec<TokenId>) -> Self {
        Self {
            doc_id,
            tokens,
            is_null: false,
            relevance: None,
        }
    }

    /// The empty passage: "answer without retrieved evidence".
    pub fn null() -> Self {
        Self {
            doc_id: NULL_DOC_ID,
            tokens: Vec::new(),
            is_null: true,
            relevance: None,
        }
    }

    pub fn with_relevance(mut self, r: u8) -> Self {
        self.relevance = Some(r);
        self
    }

    pub fn is_relevant(&self) -> bool {
        self.relevance == Some(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_null && !self.tokens.is_empty() {
            return Err(usage("null document must have no tokens"));
        }
        if self.is_null != (self.doc_id == NULL_DOC_ID) {
            return Err(usage(format!(
                "doc id {} is reserved for the null document",
                NULL_DOC_ID
            )));
        }
        if let Some(r) = self.relevance {
            if r > 1 {
                return Err(usage(format!("relevance label must be 0 or 1, got {r}")));
            }
        }
        Ok(())
    }
}

/// Tokenised question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Query {
    tokens: Vec<TokenId>,
}

impl Query {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(usage("query must not be empty"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fixed-width summary of a `(query, document)` pair fed to the prior head.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEmbedding(Vec<f64>);

impl SummaryEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(usage("summary embedding must be finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Contract for a document-conditioned next-token model.
///
/// Implementations are read-only during scoring and may be shared across
/// threads; training takes exclusive access through [`TrainableBackend`].
pub trait ScorerBackend: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    /// `P(· | history, query, doc)` over the vocabulary.
    fn next_token_logdist(
        &self,
        query: &Query,
        doc: &Document,
        history: &[TokenId],
    ) -> Result<LogDistribution>;

    fn summary_embedding(&self, query: &Query, doc: &Document) -> Result<SummaryEmbedding>;

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let v = self.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(usage(format!("token {t} outside vocabulary of size {v}"))),
            None => Ok(()),
        }
    }
}

/// A backend whose scoring path can be recorded on a [`Tape`].
///
/// `params` are the tape leaves for [`TrainableBackend::parameters`], in
/// the same order.
pub trait TrainableBackend: ScorerBackend + Clone {
    fn parameters(&self) -> &[Parameter];

    fn parameters_mut(&mut self) -> &mut [Parameter];

    /// Teacher-forced log-probabilities `log P(answer[j] | answer[..j], query, doc)`,
    /// one scalar node per answer position.
    fn record_answer_logprobs(
        &self,
        tape: &mut Tape,
        params: &[Var],
        query: &Query,
        doc: &Document,
        answer: &[TokenId],
    ) -> Result<Vec<Var>>;

    /// Summary embedding as a tape node of width [`ScorerBackend::embedding_dim`].
    fn record_embedding(
        &self,
        tape: &mut Tape,
        params: &[Var],
        query: &Query,
        doc: &Document,
    ) -> Result<Var>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Parameter::len).sum()
    }
}

/// Indices of `doc_ids` sorted by ascending id.
///
/// Every reduction over documents runs in this order so that results do not
/// depend on how the retrieval list happens to be arranged.
pub fn canonical_order(doc_ids: &[DocId]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..doc_ids.len()).collect();
    idx.sort_by_key(|&i| (doc_ids[i], i));
    idx
}

/// Rejects lists with repeated document ids.
pub fn check_unique_ids(docs: &[Document]) -> Result<()> {
    let ids: Vec<DocId> = docs.iter().map(|d| d.doc_id).collect();
    let order = canonical_order(&ids);
    for w in order.windows(2) {
        if ids[w[0]] == ids[w[1]] {
            return Err(usage(format!("duplicate document id {}", ids[w[0]])));
        }
    }
    Ok(())
}

/// Log-softmax of `logits`, reduced in canonical document order and
/// returned in input order.
pub fn normalize_canonical(logits: &[f64], doc_ids: &[DocId]) -> Result<LogDistribution> {
    if logits.is_empty() {
        return Err(usage("cannot normalize an empty document list"));
    }
    let order = canonical_order(doc_ids);
    let ordered: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    let z = lse(&ordered);
    if z == f64::NEG_INFINITY {
        return Err(crate::BeragError::Degenerate(logits.len()));
    }
    LogDistribution::new(logits.iter().map(|v| v - z).collect())
}
