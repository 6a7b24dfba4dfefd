//! Ensemble decoding, document pruning, deflection and the
//! concatenated-context baseline.
//!
//! Each step computes the posterior-weighted mixture of the active
//! documents' next-token distributions, emits its argmax, adds each
//! document's log-probability of that token to its history likelihood and
//! finally (optionally) prunes low-posterior documents.

mod state;
mod trace;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{check_unique_ids, prior_distribution, Document, PriorHead, Query, ScorerBackend, TokenId};
use crate::error::{usage, BeragError, Result};
use crate::numerics::{lse, LogDistribution};

pub use state::EnsembleState;
pub use trace::{DecodeTrace, StepRecord};

/// Below this many active documents a step is scored on the calling thread.
const PARALLEL_MIN_DOCS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Documents used from the head of the retrieval list.
    pub k: usize,
    pub max_new_tokens: usize,
    pub top_p_pruning: bool,
    /// Append the empty passage when the list does not already contain it.
    pub include_null_doc: bool,
    pub deflection: bool,
    pub eos: TokenId,
    /// Context window of the concatenated baseline, in tokens.
    pub context_limit: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_new_tokens: 8,
            top_p_pruning: false,
            include_null_doc: false,
            deflection: false,
            eos: 0,
            context_limit: 4096,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(usage("k must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(usage("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, including the end-of-sequence token if reached.
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
    /// True when deflection is enabled and the empty passage ends with the
    /// highest posterior.
    pub deflected: bool,
}

/// Truncates to the first `k` documents and appends the empty passage when asked.
pub fn prepare_docs(docs: &[Document], config: &DecodeConfig) -> Result<Vec<Document>> {
    config.validate()?;
    let mut out: Vec<Document> = docs.iter().take(config.k).cloned().collect();
    if config.include_null_doc && !out.iter().any(|d| d.is_null) {
        out.push(Document::null());
    }
    if out.is_empty() {
        return Err(usage("no documents to decode with"));
    }
    for d in &out {
        d.validate()?;
    }
    check_unique_ids(&out)?;
    if config.deflection && !out.iter().any(|d| d.is_null) {
        return Err(usage("deflection needs the empty passage in the document list"));
    }
    Ok(out)
}

fn score_all<B: ScorerBackend + ?Sized>(
    backend: &B,
    query: &Query,
    docs: &[Document],
    active: &[usize],
    history: &[TokenId],
) -> Result<Vec<LogDistribution>> {
    if active.len() >= PARALLEL_MIN_DOCS {
        active
            .par_iter()
            .map(|&k| backend.next_token_logdist(query, &docs[k], history))
            .collect()
    } else {
        active
            .iter()
            .map(|&k| backend.next_token_logdist(query, &docs[k], history))
            .collect()
    }
}

fn null_index(docs: &[Document]) -> Option<usize> {
    docs.iter().position(|d| d.is_null)
}

fn sq(n: usize) -> u64 {
    (n as u64) * (n as u64)
}

/// Full ensemble decode: prepares the list, evaluates the prior head and
/// runs [`berag_decode_with_prior`].
pub fn berag_decode<B: ScorerBackend + ?Sized>(
    query: &Query,
    docs: &[Document],
    backend: &B,
    head: &PriorHead,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    let start = Instant::now();
    let docs = prepare_docs(docs, config)?;
    let prior = prior_distribution(head, backend, query, &docs)?;
    let mut out = berag_decode_with_prior(query, &docs, backend, &prior, config)?;
    out.trace.prefill_elapsed = start.elapsed();
    Ok(out)
}

/// Ensemble decode over an already prepared list with an explicit prior.
pub fn berag_decode_with_prior<B: ScorerBackend + ?Sized>(
    query: &Query,
    docs: &[Document],
    backend: &B,
    log_prior: &LogDistribution,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    if config.deflection && null_index(docs).is_none() {
        return Err(usage("deflection needs the empty passage in the document list"));
    }
    let mut state = EnsembleState::from_log_prior(docs.iter().map(|d| d.doc_id).collect(), log_prior)?;
    let k_original = docs.len();
    let null = null_index(docs);
    let x = query.len();

    let mut trace = DecodeTrace {
        doc_ids: state.doc_ids().to_vec(),
        prior: log_prior.probs(),
        prefill_pairs: docs.iter().map(|d| sq(x + d.tokens.len())).sum(),
        prior_deflection: null.filter(|_| config.deflection).map(|z| state.map_document() == z),
        ..DecodeTrace::default()
    };
    let mut tokens = Vec::new();

    for j in 0..config.max_new_tokens {
        let t0 = Instant::now();
        let active = state.active_indices();
        let per_doc = score_all(backend, query, docs, &active, &tokens)?;
        let token = state.step_mixture(&per_doc)?.argmax() as TokenId;
        state.update_posterior(token, &per_doc)?;
        if config.top_p_pruning {
            state.prune_top_p(k_original);
        }
        let elapsed = t0.elapsed();

        let log_posterior = state.log_posterior();
        let mut survivors: Vec<_> = state.active_indices().iter().map(|&k| docs[k].doc_id).collect();
        survivors.sort_unstable();
        trace.steps.push(StepRecord {
            step: j,
            token,
            active: survivors,
            posterior: log_posterior.iter().map(|v| v.exp()).collect(),
            log_posterior,
            tokens_scored: active.len(),
            attention_pairs: active.iter().map(|&k| (x + docs[k].tokens.len() + j) as u64).sum(),
            elapsed,
        });
        tokens.push(token);
        if token == config.eos {
            break;
        }
    }

    let deflected = config.deflection && null == Some(state.map_document());
    Ok(DecodeOutput { tokens, trace, deflected })
}

/// Greedy decode conditioned on a single document.
pub fn single_doc_decode<B: ScorerBackend + ?Sized>(
    query: &Query,
    doc: &Document,
    backend: &B,
    max_new_tokens: usize,
    eos: TokenId,
) -> Result<Vec<TokenId>> {
    let mut tokens = Vec::new();
    for _ in 0..max_new_tokens {
        let t = backend.next_token_logdist(query, doc, &tokens)?.argmax() as TokenId;
        tokens.push(t);
        if t == eos {
            break;
        }
    }
    Ok(tokens)
}

/// Teacher-forced `log P(answer | query, docs)` under the ensemble.
pub fn sequence_log_likelihood<B: ScorerBackend + ?Sized>(
    query: &Query,
    answer: &[TokenId],
    docs: &[Document],
    backend: &B,
    head: &PriorHead,
) -> Result<f64> {
    let prior = prior_distribution(head, backend, query, docs)?;
    sequence_log_likelihood_with_prior(query, answer, docs, backend, &prior)
}

/// [`sequence_log_likelihood`] with an explicit prior.
pub fn sequence_log_likelihood_with_prior<B: ScorerBackend + ?Sized>(
    query: &Query,
    answer: &[TokenId],
    docs: &[Document],
    backend: &B,
    log_prior: &LogDistribution,
) -> Result<f64> {
    if answer.is_empty() {
        return Err(usage("answer must not be empty"));
    }
    let mut state = EnsembleState::from_log_prior(docs.iter().map(|d| d.doc_id).collect(), log_prior)?;
    let all = state.active_indices();
    let mut total = 0.0;
    for (j, &y) in answer.iter().enumerate() {
        let per_doc = score_all(backend, query, docs, &all, &answer[..j])?;
        let m = state.step_mixture(&per_doc)?;
        let lp = m
            .get(y as usize)
            .ok_or_else(|| usage(format!("answer token {y} outside vocabulary")))?;
        total += lp;
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        state.update_posterior(y, &per_doc)?;
    }
    Ok(total)
}

/// The list concatenated, in the given order, into one pseudo-document.
pub fn concat_documents(docs: &[Document]) -> Result<Document> {
    let first = docs.first().ok_or_else(|| usage("no documents to concatenate"))?;
    Ok(Document {
        doc_id: first.doc_id,
        tokens: docs.iter().flat_map(|d| d.tokens.iter().copied()).collect(),
        is_null: docs.iter().all(|d| d.is_null),
        relevance: None,
    })
}

/// Greedy decode conditioned on the concatenation of the first `k` documents.
pub fn concat_decode<B: ScorerBackend + ?Sized>(
    query: &Query,
    docs: &[Document],
    backend: &B,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    let start = Instant::now();
    let list: Vec<Document> = docs.iter().take(config.k).cloned().collect();
    let doc = concat_documents(&list)?;
    let context = query.len() + doc.tokens.len();
    if context > config.context_limit {
        return Err(BeragError::OutOfLength {
            needed: context,
            limit: config.context_limit,
        });
    }
    let mut trace = DecodeTrace {
        doc_ids: vec![doc.doc_id],
        prior: vec![1.0],
        prefill_pairs: sq(context),
        prefill_elapsed: start.elapsed(),
        ..DecodeTrace::default()
    };
    let mut tokens = Vec::new();
    for j in 0..config.max_new_tokens {
        let t0 = Instant::now();
        let token = backend.next_token_logdist(query, &doc, &tokens)?.argmax() as TokenId;
        trace.steps.push(StepRecord {
            step: j,
            token,
            active: vec![doc.doc_id],
            posterior: vec![1.0],
            log_posterior: vec![0.0],
            tokens_scored: 1,
            attention_pairs: (context + j) as u64,
            elapsed: t0.elapsed(),
        });
        tokens.push(token);
        if token == config.eos {
            break;
        }
    }
    Ok(DecodeOutput {
        tokens,
        trace,
        deflected: false,
    })
}

/// Brute-force `log Σ_k π_k Π_j P_k(y_j | y_<j)`, summed per document first.
///
/// Independent of the incremental posterior path; used to cross-check it.
pub fn brute_force_log_marginal<B: ScorerBackend + ?Sized>(
    query: &Query,
    answer: &[TokenId],
    docs: &[Document],
    backend: &B,
    log_prior: &LogDistribution,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(docs.len());
    for (d, lp) in docs.iter().zip(log_prior.values()) {
        let mut ll = *lp;
        for j in 0..answer.len() {
            ll += backend.next_token_logdist(query, d, &answer[..j])?.values()[answer[j] as usize];
        }
        terms.push(ll);
    }
    Ok(lse(&terms))
}
