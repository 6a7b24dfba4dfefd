use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_unique_ids, normalize_canonical, Document, Query, ScorerBackend, SummaryEmbedding};
use crate::error::{usage, Result};
use crate::numerics::{Activation, LogDistribution, Parameter, Tape, Tensor, Var};

/// Two-layer scoring head `s(e) = w2 · act(W1 e + b1) + b2` over summary
/// embeddings. Its softmax across a retrieval list is the document prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHead {
    dim: usize,
    activation: Activation,
    /// `[w1 (d×d), b1 (d), w2 (1×d), b2 (1)]`
    params: Vec<Parameter>,
}

impl PriorHead {
    fn from_parts(dim: usize, activation: Activation, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self> {
        Ok(Self {
            dim,
            activation,
            params: vec![
                Parameter::new("prior.w1", Tensor::matrix(dim, dim, w1)?),
                Parameter::new("prior.b1", Tensor::new(vec![dim], b1)?),
                Parameter::new("prior.w2", Tensor::matrix(1, dim, w2)?),
                Parameter::new("prior.b2", Tensor::scalar(b2)),
            ],
        })
    }

    /// All-zero head: every document gets logit 0, i.e. a uniform prior.
    pub fn zeros(dim: usize, activation: Activation) -> Self {
        Self::from_parts(dim, activation, vec![0.0; dim * dim], vec![0.0; dim], vec![0.0; dim], 0.0)
            .expect("shapes are consistent by construction")
    }

    /// Gaussian initialisation with variance `1/d` for the weights, zero biases.
    pub fn random(dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        let w1 = (0..dim * dim).map(|_| normal.sample(&mut rng)).collect();
        let w2 = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        Self::from_parts(dim, activation, w1, vec![0.0; dim], w2, 0.0)
            .expect("shapes are consistent by construction")
    }

    /// Explicit weights; `w1` is row-major `d×d`.
    pub fn from_weights(
        activation: Activation,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        let dim = b1.len();
        if w1.len() != dim * dim || w2.len() != dim {
            return Err(usage("prior head weight shapes do not match"));
        }
        Self::from_parts(dim, activation, w1, b1, w2, b2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let want: [&[usize]; 4] = [&[d, d], &[d], &[1, d], &[1]];
        for (p, shape) in self.params.iter().zip(want) {
            if p.value.shape() != shape {
                return Err(usage(format!("prior head parameter {} has shape {:?}", p.id, p.value.shape())));
            }
        }
        Ok(())
    }

    /// Scalar relevance score for one embedding.
    pub fn prior_logit(&self, e: &SummaryEmbedding) -> Result<f64> {
        let d = self.dim;
        if e.dim() != d {
            return Err(usage(format!("embedding width {} does not match prior head width {d}", e.dim())));
        }
        let w1 = self.params[0].value.data();
        let b1 = self.params[1].value.data();
        let w2 = self.params[2].value.data();
        let b2 = self.params[3].value.data()[0];
        let mut s = 0.0;
        for i in 0..d {
            let pre: f64 = w1[i * d..(i + 1) * d].iter().zip(e.values()).map(|(w, x)| w * x).sum::<f64>() + b1[i];
            s += w2[i] * self.activation.apply(pre);
        }
        Ok(s + b2)
    }

    /// Records `s(e)` on a tape; `vars` are leaves for [`PriorHead::parameters`].
    pub fn record(&self, tape: &mut Tape, vars: &[Var], e: Var) -> Var {
        let pre = tape.matvec(vars[0], e);
        let pre = tape.add(pre, vars[1]);
        let h = tape.activation(pre, self.activation);
        let s = tape.matvec(vars[2], h);
        tape.add(s, vars[3])
    }
}

/// Per-document prior logits, in input order.
pub fn prior_logits<B: ScorerBackend + ?Sized>(
    head: &PriorHead,
    backend: &B,
    query: &Query,
    docs: &[Document],
) -> Result<Vec<f64>> {
    docs.iter()
        .map(|d| head.prior_logit(&backend.summary_embedding(query, d)?))
        .collect()
}

/// Softmax of the prior head over a retrieval list.
///
/// Entries follow input order; the normaliser is reduced in ascending
/// document-id order, so permuting `docs` permutes the output bit-exactly.
pub fn prior_distribution<B: ScorerBackend + ?Sized>(
    head: &PriorHead,
    backend: &B,
    query: &Query,
    docs: &[Document],
) -> Result<LogDistribution> {
    if docs.is_empty() {
        return Err(usage("prior over an empty document list"));
    }
    check_unique_ids(docs)?;
    let logits = prior_logits(head, backend, query, docs)?;
    let ids: Vec<_> = docs.iter().map(|d| d.doc_id).collect();
    normalize_canonical(&logits, &ids)
}
