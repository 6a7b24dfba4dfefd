use crate::backend::{canonical_order, DocId, TokenId};
use crate::error::{usage, BeragError, Result};
use crate::numerics::{lse, LogDistribution};

/// Running document posterior of one ensemble decode.
///
/// Arrays are indexed in input order. The posterior is never stored; it is
/// derived from `history_ll + log_prior` over the active set, reduced in
/// ascending document-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    doc_ids: Vec<DocId>,
    log_prior: Vec<f64>,
    history_ll: Vec<f64>,
    active: Vec<bool>,
    order: Vec<usize>,
    step: usize,
}

impl EnsembleState {
    /// Fresh state at step 0: empty history, every document active.
    pub fn from_log_prior(doc_ids: Vec<DocId>, log_prior: &LogDistribution) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(usage("ensemble needs at least one document"));
        }
        if doc_ids.len() != log_prior.len() {
            return Err(usage(format!(
                "{} documents but a prior over {}",
                doc_ids.len(),
                log_prior.len()
            )));
        }
        let order = canonical_order(&doc_ids);
        if order.windows(2).any(|w| doc_ids[w[0]] == doc_ids[w[1]]) {
            return Err(usage("duplicate document id in ensemble"));
        }
        let k = doc_ids.len();
        Ok(Self {
            doc_ids,
            log_prior: log_prior.values().to_vec(),
            history_ll: vec![0.0; k],
            active: vec![true; k],
            order,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[DocId] {
        &self.doc_ids
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    /// `log P(y_<j | x, z_k)` per document.
    pub fn history_log_likelihood(&self) -> &[f64] {
        &self.history_ll
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    /// Active document indices in ascending input order.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Log posterior per document in input order; `-inf` for pruned ones.
    pub fn log_posterior(&self) -> Vec<f64> {
        let joint: Vec<f64> = (0..self.len())
            .map(|k| {
                if self.active[k] {
                    self.history_ll[k] + self.log_prior[k]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let canonical: Vec<f64> = self.order.iter().filter(|&&k| self.active[k]).map(|&k| joint[k]).collect();
        let z = lse(&canonical);
        joint.iter().map(|v| v - z).collect()
    }

    pub fn posterior(&self) -> LogDistribution {
        LogDistribution::new(self.log_posterior()).expect("posterior over a non-empty active set is normalized")
    }

    fn check_per_doc(&self, per_doc: &[LogDistribution]) -> Result<usize> {
        let n = self.active_count();
        if per_doc.len() != n {
            return Err(usage(format!(
                "{} per-document distributions for {n} active documents",
                per_doc.len()
            )));
        }
        let vocab = per_doc[0].len();
        if per_doc.iter().any(|d| d.len() != vocab) {
            return Err(usage("per-document distributions differ in vocabulary size"));
        }
        Ok(vocab)
    }

    /// Posterior-weighted mixture of the active documents' next-token
    /// distributions. `per_doc` follows [`EnsembleState::active_indices`].
    pub fn step_mixture(&self, per_doc: &[LogDistribution]) -> Result<LogDistribution> {
        let vocab = self.check_per_doc(per_doc)?;
        let post = self.log_posterior();
        let active = self.active_indices();
        // position of each active document inside per_doc, in canonical order
        let slots: Vec<(usize, usize)> = self
            .order
            .iter()
            .filter(|&&k| self.active[k])
            .map(|&k| (k, active.binary_search(&k).expect("active index")))
            .collect();
        let mut terms = vec![0.0; slots.len()];
        let mixture = (0..vocab)
            .map(|t| {
                for (term, &(k, s)) in terms.iter_mut().zip(&slots) {
                    *term = per_doc[s].values()[t] + post[k];
                }
                lse(&terms)
            })
            .collect();
        LogDistribution::new(mixture)
    }

    /// Adds `log P(token | ·, z_k)` to every active document's history
    /// likelihood and advances the step.
    pub fn update_posterior(&mut self, token: TokenId, per_doc: &[LogDistribution]) -> Result<()> {
        let vocab = self.check_per_doc(per_doc)?;
        let t = token as usize;
        if t >= vocab {
            return Err(usage(format!("token {token} outside vocabulary of size {vocab}")));
        }
        for (k, d) in self.active_indices().into_iter().zip(per_doc) {
            self.history_ll[k] += d.values()[t];
        }
        if self.active.iter().zip(&self.history_ll).zip(&self.log_prior).all(|((a, l), p)| !a || l + p == f64::NEG_INFINITY) {
            return Err(BeragError::Degenerate(self.active_count()));
        }
        self.step += 1;
        Ok(())
    }

    /// Keeps the smallest set of documents, taken by descending posterior
    /// (ties by ascending id), whose mass reaches `1 - 1/(2 k_original)`.
    /// Returns the ids removed by this call.
    pub fn prune_top_p(&mut self, k_original: usize) -> Vec<DocId> {
        let threshold = 1.0 - 1.0 / (2.0 * k_original.max(1) as f64);
        let post = self.log_posterior();
        let mut ranked = self.active_indices();
        ranked.sort_by(|&a, &b| post[b].total_cmp(&post[a]).then(self.doc_ids[a].cmp(&self.doc_ids[b])));
        let mut mass = 0.0;
        let mut keep = ranked.len();
        for (i, &k) in ranked.iter().enumerate() {
            mass += post[k].exp();
            if mass >= threshold {
                keep = i + 1;
                break;
            }
        }
        let mut removed: Vec<DocId> = ranked[keep..].iter().map(|&k| self.doc_ids[k]).collect();
        for &k in &ranked[keep..] {
            self.active[k] = false;
        }
        removed.sort_unstable();
        removed
    }

    /// Index of the document with the highest posterior, ties to the lowest id.
    pub fn map_document(&self) -> usize {
        let post = self.log_posterior();
        let mut best = self.order[0];
        for &k in &self.order[1..] {
            if post[k] > post[best] {
                best = k;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize_logits;

    fn dist(p: &[f64]) -> LogDistribution {
        LogDistribution::new(p.iter().map(|x| x.ln()).collect()).unwrap()
    }

    fn uniform(k: usize) -> EnsembleState {
        EnsembleState::from_log_prior((1..=k as u64).collect(), &LogDistribution::uniform(k).unwrap()).unwrap()
    }

    #[test]
    fn step_zero_posterior_is_prior() {
        let s = uniform(2);
        assert_eq!(s.posterior().probs(), vec![0.5, 0.5]);
        assert_eq!(uniform(1).posterior().values(), &[0.0]);
    }

    #[test]
    fn mixture_examples() {
        let s = uniform(2);
        let m = s.step_mixture(&[dist(&[0.9, 0.1]), dist(&[0.1, 0.9])]).unwrap();
        assert!((m.probs()[0] - 0.5).abs() < 1e-12);

        let prior = dist(&[0.9, 0.1]);
        let s = EnsembleState::from_log_prior(vec![1, 2], &prior).unwrap();
        let m = s.step_mixture(&[dist(&[0.8, 0.2]), dist(&[0.2, 0.8])]).unwrap();
        assert!((m.probs()[1] - (0.9 * 0.2 + 0.1 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixture_is_exact() {
        let prior = normalize_logits(&[0.0, f64::NEG_INFINITY]).unwrap();
        let s = EnsembleState::from_log_prior(vec![1, 2], &prior).unwrap();
        let d1 = dist(&[0.3, 0.7]);
        let m = s.step_mixture(&[d1.clone(), dist(&[0.6, 0.4])]).unwrap();
        assert_eq!(m, d1);
    }

    #[test]
    fn bayes_updates() {
        let mut s = uniform(2);
        let step1 = [dist(&[0.9, 0.1]), dist(&[0.1, 0.9])];
        s.update_posterior(0, &step1).unwrap();
        let p = s.posterior().probs();
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);

        let step2 = [dist(&[0.8, 0.2]), dist(&[0.2, 0.8])];
        s.update_posterior(1, &step2).unwrap();
        let p = s.posterior().probs();
        assert!((p[0] - 0.18 / 0.26).abs() < 1e-12);
        assert!((p[1] - 0.08 / 0.26).abs() < 1e-12);
        assert_eq!(s.step(), 2);

        let before = s.posterior();
        let same = dist(&[0.4, 0.6]);
        s.update_posterior(1, &[same.clone(), same]).unwrap();
        for (a, b) in before.values().iter().zip(s.posterior().values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prior_is_absorbing() {
        let prior = normalize_logits(&[0.0, f64::NEG_INFINITY]).unwrap();
        let mut s = EnsembleState::from_log_prior(vec![1, 2], &prior).unwrap();
        for _ in 0..4 {
            s.update_posterior(1, &[dist(&[0.99, 0.01]), dist(&[0.01, 0.99])]).unwrap();
            assert_eq!(s.posterior().probs(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn size_mismatch() {
        let s = uniform(2);
        assert!(s.step_mixture(&[dist(&[0.5, 0.5])]).is_err());
        assert!(s.step_mixture(&[dist(&[0.5, 0.5]), dist(&[0.2, 0.3, 0.5])]).is_err());
    }

    #[test]
    fn prune_keeps_minimal_mass_prefix() {
        let p = [0.90, 0.06, 0.01, 0.01, 0.01, 0.01, 0.0, 0.0, 0.0, 0.0];
        let mut s = EnsembleState::from_log_prior((1..=10).collect(), &dist(&p)).unwrap();
        let removed = s.prune_top_p(10);
        assert_eq!(s.active_indices(), vec![0, 1]);
        assert_eq!(removed, (3..=10).collect::<Vec<_>>());
        let post = s.posterior().probs();
        assert!((post[0] - 0.90 / 0.96).abs() < 1e-12);

        let mut s = EnsembleState::from_log_prior((1..=10).collect(), &dist(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        s.prune_top_p(10);
        assert_eq!(s.active_count(), 1);

        let mut s = uniform(10);
        s.prune_top_p(10);
        assert_eq!(s.active_count(), 10);
    }

    #[test]
    fn prune_ties_break_by_id() {
        // a threshold of 0.5 is met by either of two equal halves; the lower id stays
        let mut s = EnsembleState::from_log_prior(vec![9, 4], &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(s.prune_top_p(1), vec![9]);
        assert_eq!(s.active_indices(), vec![1]);
    }

    #[test]
    fn map_document_prefers_lowest_id_on_ties() {
        let s = EnsembleState::from_log_prior(vec![5, 0, 3], &dist(&[0.4, 0.4, 0.2])).unwrap();
        assert_eq!(s.map_document(), 1);
    }
}
