use std::collections::HashMap;

use super::{Document, Query, ScorerBackend, SummaryEmbedding, TokenId, TrainableBackend};
use crate::error::{usage, Result};
use crate::numerics::{LogDistribution, Parameter, Tape, Tensor, Var};

/// Width of the oracle's hand-built embedding: `[match, length, is_null]`.
pub const ORACLE_FEATURES: usize = 3;

#[derive(Debug, Clone)]
struct Fact {
    doc: Vec<TokenId>,
    answer: Vec<TokenId>,
}

/// Deterministic scorer backed by an answer key.
///
/// A document "answers" a query when it contains, as a contiguous span, a
/// fact document registered for that query. Given such a document and a
/// history that is a prefix of the registered answer, the next answer token
/// gets mass `1 - epsilon` and the remaining mass is spread evenly. Every
/// other case is uniform over the vocabulary.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    vocab: usize,
    epsilon: f64,
    max_len: usize,
    facts: HashMap<Vec<TokenId>, Vec<Fact>>,
}

impl OracleBackend {
    pub const DEFAULT_EPSILON: f64 = 0.05;

    pub fn new(vocab: usize, epsilon: f64) -> Result<Self> {
        if vocab < 2 {
            return Err(usage("oracle needs a vocabulary of at least two tokens"));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(usage(format!("oracle epsilon must be in [0, 1), got {epsilon}")));
        }
        Ok(Self {
            vocab,
            epsilon,
            max_len: 32,
            facts: HashMap::new(),
        })
    }

    /// Normaliser for the length feature.
    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len.max(1);
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Adds `doc` as evidence answering `query` with `answer`.
    pub fn register(&mut self, query: &[TokenId], doc: &[TokenId], answer: &[TokenId]) {
        let entry = self.facts.entry(query.to_vec()).or_default();
        if !entry.iter().any(|f| f.doc == doc) {
            entry.push(Fact {
                doc: doc.to_vec(),
                answer: answer.to_vec(),
            });
        }
    }

    pub fn num_facts(&self) -> usize {
        self.facts.values().map(Vec::len).sum()
    }

    fn answer_for(&self, query: &Query, doc: &Document) -> Option<&[TokenId]> {
        if doc.is_null || doc.tokens.is_empty() {
            return None;
        }
        self.facts.get(query.tokens())?.iter().find_map(|f| {
            let hit = !f.doc.is_empty()
                && doc.tokens.len() >= f.doc.len()
                && doc.tokens.windows(f.doc.len()).any(|w| w == f.doc.as_slice());
            hit.then_some(f.answer.as_slice())
        })
    }

    fn distribution(&self, query: &Query, doc: &Document, history: &[TokenId]) -> Vec<f64> {
        let next = self
            .answer_for(query, doc)
            .filter(|a| history.len() < a.len() && a.starts_with(history))
            .map(|a| a[history.len()] as usize);
        match next {
            Some(gold) => {
                let rest = (self.epsilon / (self.vocab - 1) as f64).ln();
                let mut v = vec![rest; self.vocab];
                v[gold] = (1.0 - self.epsilon).ln();
                v
            }
            None => vec![-(self.vocab as f64).ln(); self.vocab],
        }
    }

    fn features(&self, query: &Query, doc: &Document) -> Vec<f64> {
        let mut distinct: Vec<TokenId> = query.tokens().to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let hits = distinct.iter().filter(|t| doc.tokens.contains(t)).count();
        vec![
            hits as f64 / distinct.len() as f64,
            doc.tokens.len() as f64 / self.max_len as f64,
            if doc.is_null { 1.0 } else { 0.0 },
        ]
    }
}

impl ScorerBackend for OracleBackend {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn embedding_dim(&self) -> usize {
        ORACLE_FEATURES
    }

    fn next_token_logdist(
        &self,
        query: &Query,
        doc: &Document,
        history: &[TokenId],
    ) -> Result<LogDistribution> {
        self.check_tokens(query.tokens())?;
        self.check_tokens(&doc.tokens)?;
        self.check_tokens(history)?;
        LogDistribution::new(self.distribution(query, doc, history))
    }

    fn summary_embedding(&self, query: &Query, doc: &Document) -> Result<SummaryEmbedding> {
        self.check_tokens(query.tokens())?;
        self.check_tokens(&doc.tokens)?;
        SummaryEmbedding::new(self.features(query, doc))
    }
}

impl TrainableBackend for OracleBackend {
    fn parameters(&self) -> &[Parameter] {
        &[]
    }

    fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut []
    }

    fn record_answer_logprobs(
        &self,
        tape: &mut Tape,
        _params: &[Var],
        query: &Query,
        doc: &Document,
        answer: &[TokenId],
    ) -> Result<Vec<Var>> {
        (0..answer.len())
            .map(|j| {
                let d = self.next_token_logdist(query, doc, &answer[..j])?;
                Ok(tape.leaf(Tensor::scalar(d.values()[answer[j] as usize])))
            })
            .collect()
    }

    fn record_embedding(
        &self,
        tape: &mut Tape,
        _params: &[Var],
        query: &Query,
        doc: &Document,
    ) -> Result<Var> {
        let e = self.summary_embedding(query, doc)?;
        Ok(tape.leaf(Tensor::vector(e.values().to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(eps: f64) -> (OracleBackend, Query, Document) {
        let mut o = OracleBackend::new(16, eps).unwrap();
        let q = Query::new(vec![3, 9]).unwrap();
        let doc = Document::new(5, vec![3, 9, 12, 13, 0]);
        o.register(q.tokens(), &doc.tokens, &[12, 13, 0]);
        (o, q, doc)
    }

    #[test]
    fn gold_document_concentrates_on_next_token() {
        let (o, q, doc) = setup(0.05);
        let d = o.next_token_logdist(&q, &doc, &[12]).unwrap();
        let p = d.probs();
        assert!((p[13] - 0.95).abs() < 1e-12);
        for (t, pt) in p.iter().enumerate() {
            if t != 13 {
                assert!((pt - 0.05 / 15.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn irrelevant_document_is_uniform() {
        let (o, q, _) = setup(0.05);
        let other = Document::new(6, vec![4, 9, 7, 0]);
        let d = o.next_token_logdist(&q, &other, &[]).unwrap();
        assert!(d.values().iter().all(|v| (v - (1.0f64 / 16.0).ln()).abs() < 1e-15));
    }

    #[test]
    fn off_prefix_history_is_uniform() {
        let (o, q, doc) = setup(0.05);
        let d = o.next_token_logdist(&q, &doc, &[11]).unwrap();
        assert_eq!(d, LogDistribution::uniform(16).unwrap());
    }

    #[test]
    fn zero_epsilon_gives_hard_zeros() {
        let (o, q, doc) = setup(0.0);
        let d = o.next_token_logdist(&q, &doc, &[]).unwrap();
        assert_eq!(d.values()[12], 0.0);
        assert_eq!(d.values()[1], f64::NEG_INFINITY);
    }

    #[test]
    fn containment_counts_as_evidence() {
        let (o, q, doc) = setup(0.05);
        let mut long = vec![7, 7, 7];
        long.extend(&doc.tokens);
        long.extend([8, 8]);
        let d = o.next_token_logdist(&q, &Document::new(99, long), &[]).unwrap();
        assert_eq!(d.argmax(), 12);
    }

    #[test]
    fn out_of_vocab() {
        let (o, q, doc) = setup(0.05);
        assert!(o.next_token_logdist(&q, &doc, &[16]).is_err());
    }

    #[test]
    fn features() {
        let (o, q, doc) = setup(0.05);
        let e = o.summary_embedding(&q, &doc).unwrap();
        assert_eq!(e.values(), &[1.0, 5.0 / 32.0, 0.0]);
        assert_eq!(e, o.summary_embedding(&q, &doc).unwrap());
        let half = o.summary_embedding(&q, &Document::new(8, vec![3, 4])).unwrap();
        assert_eq!(half.values()[0], 0.5);
        let null = o.summary_embedding(&q, &Document::null()).unwrap();
        assert_eq!(null.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn greedy_follows_gold() {
        let (o, q, doc) = setup(0.4);
        let mut hist = vec![];
        for _ in 0..3 {
            let t = o.next_token_logdist(&q, &doc, &hist).unwrap().argmax() as TokenId;
            hist.push(t);
        }
        assert_eq!(hist, vec![12, 13, 0]);
    }
}
