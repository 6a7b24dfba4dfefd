//! Reranking a retrieval list by prior-head score.

use serde::Serialize;

use super::eval::{gold_position, Ratio};
use crate::backend::{prior_logits, Document, PriorHead, Query, ScorerBackend};
use crate::error::{usage, Result};
use crate::training::TrainingItem;

/// Documents sorted by descending prior logit, ties by ascending id, with their logits.
pub fn rerank_with_prior<B: ScorerBackend + ?Sized>(
    query: &Query,
    docs: &[Document],
    backend: &B,
    head: &PriorHead,
) -> Result<Vec<(Document, f64)>> {
    if docs.is_empty() {
        return Err(usage("nothing to rerank"));
    }
    let logits = prior_logits(head, backend, query, docs)?;
    Ok(rank_by_score(docs, &logits))
}

/// The sort behind [`rerank_with_prior`], for precomputed scores.
pub fn rank_by_score(docs: &[Document], scores: &[f64]) -> Vec<(Document, f64)> {
    let mut ranked: Vec<(Document, f64)> = docs.iter().cloned().zip(scores.iter().copied()).collect();
    ranked.sort_by(|(a, sa), (b, sb)| sb.total_cmp(sa).then(a.doc_id.cmp(&b.doc_id)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankReport {
    pub cutoffs: Vec<usize>,
    pub before: Vec<Ratio>,
    pub after: Vec<Ratio>,
}

impl RerankReport {
    /// `cutoff,recall_before,recall_after` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cutoff,recall_before,recall_after\n");
        for ((c, b), a) in self.cutoffs.iter().zip(&self.before).zip(&self.after) {
            let f = |r: &Ratio| r.value().map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{c},{},{}\n", f(b), f(a)));
        }
        s
    }
}

/// Recall at each cutoff for the given lists and for the same lists after reranking.
pub fn rerank_recall<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    items: &[TrainingItem],
    cutoffs: &[usize],
) -> Result<RerankReport> {
    let mut before = vec![Ratio::default(); cutoffs.len()];
    let mut after = vec![Ratio::default(); cutoffs.len()];
    for it in items {
        let ranked = rerank_with_prior(&it.query, &it.docs, backend, head)?;
        let reranked = TrainingItem {
            docs: ranked.into_iter().map(|(d, _)| d).collect(),
            ..it.clone()
        };
        for (i, &c) in cutoffs.iter().enumerate() {
            before[i].record(gold_position(it, c).is_some());
            after[i].record(gold_position(&reranked, c).is_some());
        }
    }
    Ok(RerankReport {
        cutoffs: cutoffs.to_vec(),
        before,
        after,
    })
}
