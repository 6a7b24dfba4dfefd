//! Ensemble fine-tuning loss and the supervised prior loss, both recorded
//! on a tape so gradients reach the backend and the prior head.

use super::TrainingItem;
use crate::backend::{canonical_order, PriorHead, TrainableBackend};
use crate::error::{usage, BeragError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Loss value with gradients for every backend and prior-head parameter,
/// in [`TrainableBackend::parameters`] / [`PriorHead::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub value: f64,
    pub backend: Vec<Tensor>,
    pub head: Vec<Tensor>,
}

pub(crate) struct Bound {
    pub tape: Tape,
    pub bvars: Vec<Var>,
    pub hvars: Vec<Var>,
}

impl Bound {
    pub fn new<B: TrainableBackend>(backend: &B, head: &PriorHead) -> Self {
        let mut tape = Tape::new();
        let bvars = backend.parameters().iter().map(|p| tape.param(p)).collect();
        let hvars = head.parameters().iter().map(|p| tape.param(p)).collect();
        Self { tape, bvars, hvars }
    }

    pub fn gradients<B: TrainableBackend>(&self, backend: &B, head: &PriorHead, root: Var) -> Result<LossGradients> {
        let grads = self.tape.backward(root)?;
        let collect = |vars: &[Var]| vars.iter().map(|v| grads.wrt_in(&self.tape, *v)).collect();
        debug_assert_eq!(self.bvars.len(), backend.parameters().len());
        debug_assert_eq!(self.hvars.len(), head.parameters().len());
        Ok(LossGradients {
            value: self.tape.scalar(root),
            backend: collect(&self.bvars),
            head: collect(&self.hvars),
        })
    }
}

/// `-Σ_j log Σ_k P(y_j | y_<j, x, z_k) P(z_k | y_<j, x, Z)` for one item.
pub(crate) fn record_beft<B: TrainableBackend>(
    b: &mut Bound,
    backend: &B,
    head: &PriorHead,
    item: &TrainingItem,
) -> Result<Var> {
    item.validate()?;
    let tape = &mut b.tape;
    let ids: Vec<_> = item.docs.iter().map(|d| d.doc_id).collect();
    let order = canonical_order(&ids);

    let mut scores = Vec::with_capacity(order.len());
    let mut logprobs = Vec::with_capacity(order.len());
    for &k in &order {
        let doc = &item.docs[k];
        let e = backend.record_embedding(tape, &b.bvars, &item.query, doc)?;
        scores.push(head.record(tape, &b.hvars, e));
        logprobs.push(backend.record_answer_logprobs(tape, &b.bvars, &item.query, doc, &item.answer)?);
    }

    let s = tape.concat(&scores);
    // log prior plus history log-likelihood, per document
    let mut joint = tape.log_softmax(s);
    let mut total: Option<Var> = None;
    for j in 0..item.answer.len() {
        let step: Vec<Var> = logprobs.iter().map(|lp| lp[j]).collect();
        let step = tape.concat(&step);
        let post = tape.log_softmax(joint);
        let terms = tape.add(post, step);
        let m = tape.log_sum_exp(terms);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
        joint = tape.add(joint, step);
    }
    let total = total.expect("answer is non-empty");
    Ok(tape.neg(total))
}

/// Sum over an item's documents of the binary cross-entropy between the
/// prior logit and the relevance label.
pub(crate) fn record_prior_sum<B: TrainableBackend>(
    b: &mut Bound,
    backend: &B,
    head: &PriorHead,
    item: &TrainingItem,
) -> Result<Var> {
    let labels = item
        .relevance()
        .ok_or_else(|| usage(format!("item {} lacks relevance labels", item.id)))?;
    let tape = &mut b.tape;
    let ids: Vec<_> = item.docs.iter().map(|d| d.doc_id).collect();
    let mut total: Option<Var> = None;
    for k in canonical_order(&ids) {
        let e = backend.record_embedding(tape, &b.bvars, &item.query, &item.docs[k])?;
        let s = head.record(tape, &b.hvars, e);
        // -log σ(s) = log(1 + e^{-s}),  -log(1 - σ(s)) = log(1 + e^{s})
        let arg = if labels[k] == 1 { tape.neg(s) } else { s };
        let zero = tape.leaf(Tensor::scalar(0.0));
        let pair = tape.concat(&[zero, arg]);
        let term = tape.log_sum_exp(pair);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("item has documents"))
}

fn tag(item: &TrainingItem) -> impl Fn(BeragError) -> BeragError + '_ {
    move |e| BeragError::Item {
        id: item.id.clone(),
        source: Box::new(e),
    }
}

pub fn beft_loss<B: TrainableBackend>(item: &TrainingItem, backend: &B, head: &PriorHead) -> Result<f64> {
    Ok(beft_loss_gradients(item, backend, head)?.value)
}

pub fn beft_loss_gradients<B: TrainableBackend>(
    item: &TrainingItem,
    backend: &B,
    head: &PriorHead,
) -> Result<LossGradients> {
    let mut b = Bound::new(backend, head);
    let root = record_beft(&mut b, backend, head, item).map_err(tag(item))?;
    b.gradients(backend, head, root).map_err(tag(item))
}

/// Mean binary cross-entropy of prior logits against relevance labels,
/// over every document of every item.
pub fn prior_loss<B: TrainableBackend>(items: &[TrainingItem], backend: &B, head: &PriorHead) -> Result<f64> {
    Ok(prior_loss_gradients(items, backend, head)?.value)
}

pub fn prior_loss_gradients<B: TrainableBackend>(
    items: &[TrainingItem],
    backend: &B,
    head: &PriorHead,
) -> Result<LossGradients> {
    if items.is_empty() {
        return Err(usage("prior loss over no items"));
    }
    let mut b = Bound::new(backend, head);
    let mut total: Option<Var> = None;
    let mut count = 0;
    for item in items {
        item.validate()?;
        let s = record_prior_sum(&mut b, backend, head, item)?;
        count += item.docs.len();
        total = Some(match total {
            Some(t) => b.tape.add(t, s),
            None => s,
        });
    }
    let total = total.expect("items are non-empty");
    let root = b.tape.scale(total, 1.0 / count as f64);
    b.gradients(backend, head, root)
}
