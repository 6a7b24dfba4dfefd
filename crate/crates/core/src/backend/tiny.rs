//! A deliberately small trainable scorer.
//!
//! The model reads the sequence `[sink] ⊕ query ⊕ doc ⊕ history`, where
//! `sink` is a learned "nothing to read" row. Each element gets an attention
//! logit from a learned table indexed by (decoding step, segment position),
//! so the summariser is an order-aware, position-weighted average of token
//! embeddings. A linear layer and softmax map the average to the next-token
//! distribution.
//!
//! The summary embedding for the prior head compares the query with the
//! document position by position: a learned softmax over query positions
//! weights the elementwise products `E[q_i] ⊙ E[d_i]`, so a document that
//! repeats the query's tokens in place produces squared-norm features the
//! head can pick out. It is zero for the empty passage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Document, Query, ScorerBackend, SummaryEmbedding, TokenId, TrainableBackend};
use crate::error::{usage, Result};
use crate::numerics::{lse, LogDistribution, Parameter, Tape, Tensor, Var};

const EMBED: usize = 0;
const ATTN: usize = 1;
const OUT_W: usize = 2;
const OUT_B: usize = 3;
const MATCH: usize = 4;

/// Shape and initialisation of a [`TinyBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab: usize,
    pub dim: usize,
    /// Query positions with their own attention slot; later ones share the last.
    pub max_query: usize,
    pub max_doc: usize,
    pub max_history: usize,
    /// Standard deviation of the initial token embeddings.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 16,
            max_query: 8,
            max_doc: 32,
            max_history: 8,
            embed_scale: 1.0,
            seed: 42,
        }
    }
}

impl TinyConfig {
    fn slots(&self) -> usize {
        1 + self.max_query + self.max_doc + self.max_history
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.dim == 0 || self.max_query == 0 || self.max_doc == 0 || self.max_history == 0 {
            return Err(usage("tiny backend dimensions must be positive (vocab >= 2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyBackend {
    config: TinyConfig,
    params: Vec<Parameter>,
}

impl TinyBackend {
    pub fn new(config: TinyConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab, config.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = Normal::new(0.0, config.embed_scale).map_err(|e| usage(e.to_string()))?;
        let out = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<f64> { (0..n).map(|_| dist.sample(&mut rng)).collect() };

        let params = vec![
            Parameter::new("tiny.embed", Tensor::matrix(v + 1, d, draw((v + 1) * d, &embed))?),
            Parameter::new(
                "tiny.attn",
                Tensor::zeros(&[config.max_history + 1, config.slots()]),
            ),
            Parameter::new("tiny.out_w", Tensor::matrix(v, d, draw(v * d, &out))?),
            Parameter::new("tiny.out_b", Tensor::zeros(&[v])),
            Parameter::new("tiny.match", Tensor::zeros(&[config.max_query])),
        ];
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    /// Checks parameter shapes against the config, e.g. after loading.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let want: [Vec<usize>; 5] = [
            vec![c.vocab + 1, c.dim],
            vec![c.max_history + 1, c.slots()],
            vec![c.vocab, c.dim],
            vec![c.vocab],
            vec![c.max_query],
        ];
        if self.params.len() != want.len() {
            return Err(usage("tiny backend has the wrong number of parameters"));
        }
        for (p, w) in self.params.iter().zip(want.iter()) {
            if p.value.shape() != w.as_slice() {
                return Err(usage(format!("parameter {} has shape {:?}, expected {w:?}", p.id, p.value.shape())));
            }
        }
        Ok(())
    }

    fn step_row(&self, history_len: usize) -> usize {
        history_len.min(self.config.max_history)
    }

    /// Attention slot of every sequence element, sink first.
    fn slots_for(&self, q: usize, d: usize, h: usize) -> Vec<usize> {
        let c = &self.config;
        let mut s = Vec::with_capacity(1 + q + d + h);
        s.push(0);
        s.extend((0..q).map(|i| 1 + i.min(c.max_query - 1)));
        s.extend((0..d).map(|i| 1 + c.max_query + i.min(c.max_doc - 1)));
        s.extend((0..h).map(|i| 1 + c.max_query + c.max_doc + i.min(c.max_history - 1)));
        s
    }

    /// Embedding rows of the sequence, sink first.
    fn rows_for(&self, q: &[TokenId], d: &[TokenId], h: &[TokenId]) -> Vec<usize> {
        let mut r = Vec::with_capacity(1 + q.len() + d.len() + h.len());
        r.push(self.config.vocab);
        r.extend(q.iter().chain(d).chain(h).map(|&t| t as usize));
        r
    }

    fn check(&self, query: &Query, doc: &Document, history: &[TokenId]) -> Result<()> {
        self.check_tokens(query.tokens())?;
        self.check_tokens(&doc.tokens)?;
        self.check_tokens(history)
    }

    fn weighted_rows(&self, weights_logits: &[f64], rows: &[usize]) -> Vec<f64> {
        let d = self.config.dim;
        let embed = self.params[EMBED].value.data();
        let z = lse(weights_logits);
        let mut out = vec![0.0; d];
        for (a, &r) in weights_logits.iter().zip(rows) {
            let w = (a - z).exp();
            for (o, x) in out.iter_mut().zip(&embed[r * d..(r + 1) * d]) {
                *o += w * x;
            }
        }
        out
    }

    fn logdist_plain(&self, q: &[TokenId], d: &[TokenId], h: &[TokenId]) -> Vec<f64> {
        let c = &self.config;
        let attn = &self.params[ATTN].value;
        let row = attn.row(self.step_row(h.len()));
        let slots = self.slots_for(q.len(), d.len(), h.len());
        let a: Vec<f64> = slots.iter().map(|&s| row[s]).collect();
        let hidden = self.weighted_rows(&a, &self.rows_for(q, d, h));

        let w = self.params[OUT_W].value.data();
        let b = self.params[OUT_B].value.data();
        let logits: Vec<f64> = (0..c.vocab)
            .map(|t| {
                let dot: f64 = w[t * c.dim..(t + 1) * c.dim].iter().zip(&hidden).map(|(x, y)| x * y).sum();
                dot + b[t]
            })
            .collect();
        let z = lse(&logits);
        logits.iter().map(|l| l - z).collect()
    }

    /// Positions compared by the summary embedding.
    fn aligned(&self, q: &[TokenId], d: &[TokenId]) -> usize {
        q.len().min(d.len()).min(self.config.max_query)
    }

    fn embedding_plain(&self, q: &[TokenId], d: &[TokenId]) -> Vec<f64> {
        let dim = self.config.dim;
        let n = self.aligned(q, d);
        if n == 0 {
            return vec![0.0; dim];
        }
        let a = &self.params[MATCH].value.data()[..n];
        let embed = self.params[EMBED].value.data();
        let z = lse(a);
        let mut out = vec![0.0; dim];
        for i in 0..n {
            let w = (a[i] - z).exp();
            let (qr, dr) = (q[i] as usize * dim, d[i] as usize * dim);
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * embed[qr + j] * embed[dr + j];
            }
        }
        out
    }

    fn record_weighted_rows(&self, tape: &mut Tape, embed: Var, logits: Var, rows: Vec<usize>) -> Var {
        let lw = tape.log_softmax(logits);
        let w = tape.exp(lw);
        let m = tape.gather_rows(embed, rows);
        tape.vecmat(w, m)
    }

    /// Log next-token distribution as a tape node.
    pub fn record_logdist(
        &self,
        tape: &mut Tape,
        params: &[Var],
        query: &Query,
        doc: &Document,
        history: &[TokenId],
    ) -> Result<Var> {
        self.check(query, doc, history)?;
        let (q, d) = (query.tokens(), doc.tokens.as_slice());
        let p = self.config.slots();
        let base = self.step_row(history.len()) * p;
        let idx = self
            .slots_for(q.len(), d.len(), history.len())
            .into_iter()
            .map(|s| base + s)
            .collect();
        let att = tape.gather(params[ATTN], idx);
        let hidden = self.record_weighted_rows(tape, params[EMBED], att, self.rows_for(q, d, history));
        let logits = tape.matvec(params[OUT_W], hidden);
        let logits = tape.add(logits, params[OUT_B]);
        Ok(tape.log_softmax(logits))
    }
}

impl ScorerBackend for TinyBackend {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn embedding_dim(&self) -> usize {
        self.config.dim
    }

    fn next_token_logdist(
        &self,
        query: &Query,
        doc: &Document,
        history: &[TokenId],
    ) -> Result<LogDistribution> {
        self.check(query, doc, history)?;
        LogDistribution::new(self.logdist_plain(query.tokens(), &doc.tokens, history))
    }

    fn summary_embedding(&self, query: &Query, doc: &Document) -> Result<SummaryEmbedding> {
        self.check(query, doc, &[])?;
        SummaryEmbedding::new(self.embedding_plain(query.tokens(), &doc.tokens))
    }
}

impl TrainableBackend for TinyBackend {
    fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    fn record_answer_logprobs(
        &self,
        tape: &mut Tape,
        params: &[Var],
        query: &Query,
        doc: &Document,
        answer: &[TokenId],
    ) -> Result<Vec<Var>> {
        self.check_tokens(answer)?;
        (0..answer.len())
            .map(|j| {
                let ld = self.record_logdist(tape, params, query, doc, &answer[..j])?;
                Ok(tape.select(ld, answer[j] as usize))
            })
            .collect()
    }

    fn record_embedding(
        &self,
        tape: &mut Tape,
        params: &[Var],
        query: &Query,
        doc: &Document,
    ) -> Result<Var> {
        self.check(query, doc, &[])?;
        let (q, d) = (query.tokens(), doc.tokens.as_slice());
        let n = self.aligned(q, d);
        if n == 0 {
            return Ok(tape.leaf(Tensor::zeros(&[self.config.dim])));
        }
        let a = tape.gather(params[MATCH], (0..n).collect());
        let lw = tape.log_softmax(a);
        let w = tape.exp(lw);
        let qm = tape.gather_rows(params[EMBED], q[..n].iter().map(|&t| t as usize).collect());
        let dm = tape.gather_rows(params[EMBED], d[..n].iter().map(|&t| t as usize).collect());
        let prod = tape.mul(qm, dm);
        Ok(tape.vecmat(w, prod))
    }
}
