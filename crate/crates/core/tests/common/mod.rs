//! Shared fixtures: a table-driven backend with hand-set probabilities and
//! random instance generators.
#![allow(dead_code)]

use std::collections::HashMap;

use berag::backend::{
    DocId, Document, PriorHead, Query, ScorerBackend, SummaryEmbedding, TinyBackend, TinyConfig, TokenId,
    TrainableBackend,
};
use berag::numerics::{Activation, LogDistribution, Parameter, Tape, Tensor, Var};
use berag::training::{beft_loss, beft_loss_gradients, prior_loss, prior_loss_gradients, TrainingItem};
use berag::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-document next-token tables indexed by history length. Histories
/// longer than the table reuse its last row. Documents without a table get
/// the uniform distribution.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub vocab: usize,
    pub tables: HashMap<DocId, Vec<Vec<f64>>>,
}

impl Scripted {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            tables: HashMap::new(),
        }
    }

    /// `rows` are probabilities, one row per step.
    pub fn with_probs(mut self, doc: DocId, rows: &[&[f64]]) -> Self {
        let logs = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        self.tables.insert(doc, logs);
        self
    }

    /// Random strictly positive tables for every document and `steps` rows.
    pub fn random(vocab: usize, docs: &[DocId], steps: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Self::new(vocab);
        for &d in docs {
            let rows = (0..steps)
                .map(|_| {
                    let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
                    berag::numerics::normalize_logits(&logits).unwrap().into_values()
                })
                .collect();
            s.tables.insert(d, rows);
        }
        s
    }

    fn row(&self, doc: DocId, step: usize) -> Vec<f64> {
        match self.tables.get(&doc) {
            Some(rows) => rows[step.min(rows.len() - 1)].clone(),
            None => vec![-(self.vocab as f64).ln(); self.vocab],
        }
    }
}

impl ScorerBackend for Scripted {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn embedding_dim(&self) -> usize {
        1
    }

    fn next_token_logdist(&self, _query: &Query, doc: &Document, history: &[TokenId]) -> Result<LogDistribution> {
        LogDistribution::new(self.row(doc.doc_id, history.len()))
    }

    fn summary_embedding(&self, _query: &Query, _doc: &Document) -> Result<SummaryEmbedding> {
        SummaryEmbedding::new(vec![0.0])
    }
}

/// No parameters: the scripted log-probabilities enter the tape as constants.
impl TrainableBackend for Scripted {
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
        _query: &Query,
        doc: &Document,
        answer: &[TokenId],
    ) -> Result<Vec<Var>> {
        Ok(answer
            .iter()
            .enumerate()
            .map(|(j, &y)| tape.leaf(Tensor::scalar(self.row(doc.doc_id, j)[y as usize])))
            .collect())
    }

    fn record_embedding(&self, tape: &mut Tape, _params: &[Var], _query: &Query, _doc: &Document) -> Result<Var> {
        Ok(tape.leaf(Tensor::vector(vec![0.0])))
    }
}

/// A random decoding instance over a scripted backend.
pub struct Instance {
    pub backend: Scripted,
    pub query: Query,
    pub docs: Vec<Document>,
    pub log_prior: LogDistribution,
    pub answer: Vec<TokenId>,
}

/// `K ≤ max_k` documents with distinct random ids, `|y| ≤ max_len`, `V ≤ max_vocab`.
pub fn random_instance(rng: &mut ChaCha8Rng, max_k: usize, max_len: usize, max_vocab: usize) -> Instance {
    let k = rng.random_range(1..=max_k);
    let vocab = rng.random_range(2..=max_vocab);
    let len = rng.random_range(1..=max_len);
    let mut ids: Vec<DocId> = Vec::with_capacity(k);
    while ids.len() < k {
        let id = rng.random_range(1..1000);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let backend = Scripted::random(vocab, &ids, len + 1, rng);
    let docs = ids.iter().map(|&i| Document::new(i, vec![1])).collect();
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    Instance {
        backend,
        query: Query::new(vec![1]).unwrap(),
        docs,
        log_prior: berag::numerics::normalize_logits(&logits).unwrap(),
        answer: (0..len).map(|_| rng.random_range(0..vocab) as TokenId).collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a floor on the scale, so near-zero quantities are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn item(id: &str, query: Vec<TokenId>, answer: Vec<TokenId>, docs: Vec<Document>) -> TrainingItem {
    TrainingItem {
        id: id.into(),
        query: Query::new(query).unwrap(),
        answer,
        docs,
    }
}

pub const FD_STEP: f64 = 1e-5;
// gradients smaller than this are compared absolutely
pub const FD_FLOOR: f64 = 1e-3;

pub fn small_backend(seed: u64) -> TinyBackend {
    let mut b = TinyBackend::new(TinyConfig {
        vocab: 12,
        dim: 4,
        max_query: 3,
        max_doc: 6,
        max_history: 4,
        embed_scale: 1.0,
        seed,
    })
    .unwrap();
    let mut r = rng(seed.wrapping_mul(31));
    for p in b.parameters_mut() {
        for x in p.value.data_mut() {
            *x += r.random_range(-0.5..0.5);
        }
    }
    b
}

pub fn random_items(r: &mut ChaCha8Rng, n: usize) -> Vec<TrainingItem> {
    (0..n)
        .map(|i| {
            let k = r.random_range(1..=3);
            let mut docs: Vec<Document> = (0..k)
                .map(|j| {
                    let len = r.random_range(1..9);
                    Document::new(1 + j as u64, (0..len).map(|_| r.random_range(0..12) as TokenId).collect())
                        .with_relevance(u8::from(j == 0))
                })
                .collect();
            if r.random_bool(0.5) {
                docs.push(Document::null().with_relevance(0));
            }
            let q = (0..r.random_range(1..5)).map(|_| r.random_range(0..12)).collect();
            let a = (0..r.random_range(1..6)).map(|_| r.random_range(0..12)).collect();
            item(&format!("g{i}"), q, a, docs)
        })
        .collect()
}

/// Largest relative error over every backend and head parameter.
pub fn fd_worst<F>(backend: &TinyBackend, head: &PriorHead, analytic: (&[Tensor], &[Tensor]), loss: F) -> f64
where
    F: Fn(&TinyBackend, &PriorHead) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut b = backend.clone();
    for (pi, g) in analytic.0.iter().enumerate() {
        for i in 0..g.len() {
            let x0 = b.parameters()[pi].value.data()[i];
            b.parameters_mut()[pi].value.data_mut()[i] = x0 + FD_STEP;
            let up = loss(&b, head);
            b.parameters_mut()[pi].value.data_mut()[i] = x0 - FD_STEP;
            let down = loss(&b, head);
            b.parameters_mut()[pi].value.data_mut()[i] = x0;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * FD_STEP), FD_FLOOR));
        }
    }
    let mut h = head.clone();
    for (pi, g) in analytic.1.iter().enumerate() {
        for i in 0..g.len() {
            let x0 = h.parameters()[pi].value.data()[i];
            h.parameters_mut()[pi].value.data_mut()[i] = x0 + FD_STEP;
            let up = loss(backend, &h);
            h.parameters_mut()[pi].value.data_mut()[i] = x0 - FD_STEP;
            let down = loss(backend, &h);
            h.parameters_mut()[pi].value.data_mut()[i] = x0;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * FD_STEP), FD_FLOOR));
        }
    }
    worst
}

/// Worst relative gradient error of the ensemble loss and the prior loss
/// for one seeded backend, head and batch.
pub fn loss_gradient_errors(seed: u64) -> (f64, f64) {
    let backend = small_backend(seed);
    assert!(backend.num_parameters() + 25 <= 2000);
    let head = PriorHead::random(4, Activation::Tanh, seed + 100);
    let mut r = rng(seed + 200);
    let items = random_items(&mut r, 2);

    let g = beft_loss_gradients(&items[0], &backend, &head).unwrap();
    let beft = fd_worst(&backend, &head, (&g.backend, &g.head), |b, h| beft_loss(&items[0], b, h).unwrap());
    let g = prior_loss_gradients(&items, &backend, &head).unwrap();
    let prior = fd_worst(&backend, &head, (&g.backend, &g.head), |b, h| prior_loss(&items, b, h).unwrap());
    (beft, prior)
}
