//! Ensemble fine-tuning: the end-to-end mixture likelihood loss, an
//! optional relevance loss for the prior head, empty-passage augmentation
//! and a deterministic mini-batch trainer.

mod loss;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{check_unique_ids, Document, PriorHead, Query, TokenId, TrainableBackend};
use crate::error::{usage, BeragError, Result};
use crate::numerics::{Parameter, Tensor};

pub use loss::{beft_loss, beft_loss_gradients, prior_loss, prior_loss_gradients, LossGradients};
use loss::{record_beft, record_prior_sum, Bound};

/// One `(query, answer, retrieved documents)` example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub id: String,
    #[serde(rename = "query_tokens")]
    pub query: Query,
    #[serde(rename = "answer_tokens")]
    pub answer: Vec<TokenId>,
    pub docs: Vec<Document>,
}

impl TrainingItem {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(usage(format!("item {}: empty query", self.id)));
        }
        if self.answer.is_empty() {
            return Err(usage(format!("item {}: empty answer", self.id)));
        }
        if self.docs.is_empty() {
            return Err(usage(format!("item {}: no documents", self.id)));
        }
        for d in &self.docs {
            d.validate()?;
        }
        if self.docs.iter().filter(|d| d.is_null).count() > 1 {
            return Err(usage(format!("item {}: more than one empty passage", self.id)));
        }
        check_unique_ids(&self.docs)
    }

    /// Relevance label of every document, if all are labelled.
    pub fn relevance(&self) -> Option<Vec<u8>> {
        self.docs.iter().map(|d| d.relevance).collect()
    }

    /// Index of the first document labelled relevant.
    pub fn gold_index(&self) -> Option<usize> {
        self.docs.iter().position(Document::is_relevant)
    }

    /// True when a non-empty relevant document is in the list.
    pub fn has_gold_evidence(&self) -> bool {
        self.docs.iter().any(|d| d.is_relevant() && !d.is_null)
    }
}

/// Replaces, on a seeded coin flip with probability `rate`, each item's
/// gold document by the empty passage; the relevance label moves with it.
pub fn augment_with_null(items: &[TrainingItem], rate: f64, seed: u64) -> Result<Vec<TrainingItem>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(usage(format!("augmentation rate must be in [0, 1], got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let gold = item
                .gold_index()
                .ok_or_else(|| usage(format!("item {} has no gold document to replace", item.id)))?;
            let flip = rng.random::<f64>() < rate;
            let mut out = item.clone();
            if flip && !out.docs[gold].is_null {
                out.docs[gold] = Document::null().with_relevance(1);
                out.validate()?;
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k_train: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for the backend parameters.
    pub lr: f64,
    /// Step size for the prior head; `lr * 1e-2` when unset.
    pub prior_lr: Option<f64>,
    pub null_rate: f64,
    /// Append the empty passage (relevance 0) to every list that lacks one,
    /// as evaluation with `include_null_doc` does. Without it the empty
    /// passage only ever competes with distractors during training.
    pub include_null_doc: bool,
    pub include_prior_loss: bool,
    pub prior_weight: f64,
    pub optimizer: OptimizerKind,
    /// Rescale each batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_train: 2,
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            prior_lr: None,
            null_rate: 0.0,
            include_null_doc: false,
            include_prior_loss: false,
            prior_weight: 1.0,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn prior_lr(&self) -> f64 {
        self.prior_lr.unwrap_or(self.lr * 1e-2)
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if self.k_train == 0 || self.batch_size == 0 {
            return Err(usage("k_train and batch_size must be positive"));
        }
        if !rate_ok(self.null_rate) {
            return Err(usage(format!("null_rate must be in [0, 1], got {}", self.null_rate)));
        }
        let lr_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !lr_ok(self.lr) || !lr_ok(self.prior_lr()) || !lr_ok(self.prior_weight) {
            return Err(usage("learning rates and prior weight must be finite and non-negative"));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(usage("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub prior_loss: Option<f64>,
}

/// Loss curve as CSV with header `epoch,mean_loss,prior_loss`.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,prior_loss\n");
    for e in curve {
        let prior = e.prior_loss.map(|p| p.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, prior));
    }
    s
}

#[derive(Debug, Clone)]
pub struct Trained<B> {
    pub backend: B,
    pub head: PriorHead,
    pub curve: Vec<EpochStats>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&Parameter]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

struct ItemResult {
    beft: f64,
    prior_sum: Option<f64>,
    grads: LossGradients,
}

fn item_objective<B: TrainableBackend>(
    item: &TrainingItem,
    backend: &B,
    head: &PriorHead,
    prior_scale: Option<f64>,
) -> Result<ItemResult> {
    let mut b = Bound::new(backend, head);
    let beft = record_beft(&mut b, backend, head, item)?;
    let (root, prior) = match prior_scale {
        Some(c) => {
            let p = record_prior_sum(&mut b, backend, head, item)?;
            let scaled = b.tape.scale(p, c);
            (b.tape.add(beft, scaled), Some(p))
        }
        None => (beft, None),
    };
    let grads = b.gradients(backend, head, root)?;
    Ok(ItemResult {
        beft: b.tape.scalar(beft),
        prior_sum: prior.map(|p| b.tape.scalar(p)),
        grads,
    })
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

/// Minimises the mean ensemble loss (plus the weighted relevance loss when
/// enabled) with mini-batch gradient steps. Deterministic for a fixed seed:
/// per-item gradients may be computed in parallel but are summed in batch
/// order.
pub fn train<B: TrainableBackend>(
    dataset: &[TrainingItem],
    mut backend: B,
    mut head: PriorHead,
    config: &TrainConfig,
) -> Result<Trained<B>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(usage("empty training set"));
    }
    for item in dataset {
        item.validate()?;
        if item.docs.len() != config.k_train {
            return Err(usage(format!(
                "item {} has {} documents, expected {}",
                item.id,
                item.docs.len(),
                config.k_train
            )));
        }
        if config.include_prior_loss && item.relevance().is_none() {
            return Err(usage(format!("item {} lacks relevance labels", item.id)));
        }
    }
    let mut items = if config.null_rate > 0.0 {
        augment_with_null(dataset, config.null_rate, config.seed)?
    } else {
        dataset.to_vec()
    };
    if config.include_null_doc {
        for it in items.iter_mut().filter(|it| !it.docs.iter().any(|d| d.is_null)) {
            it.docs.push(Document::null().with_relevance(0));
        }
    }
    let total_docs: usize = items.iter().map(|it| it.docs.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut adam = match config.optimizer {
        OptimizerKind::Adam => {
            let all: Vec<&Parameter> = backend.parameters().iter().chain(head.parameters()).collect();
            Some(Adam::new(&all))
        }
        OptimizerKind::Sgd => None,
    };
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut prior_sum) = (0.0, 0.0);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| BeragError::Diverged {
                epoch,
                batch: batch_idx,
                detail,
            };
            let results: Vec<Result<ItemResult>> = batch
                .par_iter()
                .map(|&i| {
                    let scale = config
                        .include_prior_loss
                        .then(|| config.prior_weight / items[i].docs.len() as f64);
                    item_objective(&items[i], &backend, &head, scale)
                })
                .collect();

            let mut acc_b: Vec<Tensor> = backend.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            let mut acc_h: Vec<Tensor> = head.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            for (&i, r) in batch.iter().zip(results) {
                let r = r.map_err(|e| diverged(format!("item {}: {e}", items[i].id)))?;
                if !r.beft.is_finite() {
                    return Err(diverged(format!("item {}: loss {}", items[i].id, r.beft)));
                }
                loss_sum += r.beft;
                prior_sum += r.prior_sum.unwrap_or(0.0);
                add_into(&mut acc_b, &r.grads.backend);
                add_into(&mut acc_h, &r.grads.head);
            }

            let mut scale = 1.0 / batch.len() as f64;
            if let Some(c) = config.clip_norm {
                let norm = acc_b
                    .iter()
                    .chain(&acc_h)
                    .flat_map(|t| t.data())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt()
                    * scale;
                if norm > c {
                    scale *= c / norm;
                }
            }
            let grads: Vec<&Tensor> = acc_b.iter().chain(&acc_h).collect();
            let lrs: Vec<f64> = std::iter::repeat_n(config.lr, acc_b.len())
                .chain(std::iter::repeat_n(config.prior_lr(), acc_h.len()))
                .collect();
            let mut params: Vec<&mut Parameter> =
                backend.parameters_mut().iter_mut().chain(head.parameters_mut().iter_mut()).collect();
            apply_update(&mut params, &grads, &lrs, scale, adam.as_mut());
            if params.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged("parameters became non-finite".into()));
            }
        }
        let n = items.len() as f64;
        curve.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            prior_loss: config.include_prior_loss.then(|| prior_sum / total_docs as f64),
        });
    }
    Ok(Trained { backend, head, curve })
}

fn apply_update(params: &mut [&mut Parameter], grads: &[&Tensor], lrs: &[f64], scale: f64, adam: Option<&mut Adam>) {
    match adam {
        None => {
            for ((p, g), &lr) in params.iter_mut().zip(grads).zip(lrs) {
                if lr == 0.0 {
                    continue;
                }
                for (x, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * g * scale;
                }
            }
        }
        Some(st) => {
            st.t += 1;
            let c1 = 1.0 - Adam::B1.powi(st.t);
            let c2 = 1.0 - Adam::B2.powi(st.t);
            for (((p, g), &lr), (m, v)) in params.iter_mut().zip(grads).zip(lrs).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
                for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g * scale;
                    *m = Adam::B1 * *m + (1.0 - Adam::B1) * g;
                    *v = Adam::B2 * *v + (1.0 - Adam::B2) * g * g;
                    if lr != 0.0 {
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + Adam::EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TinyBackend, TinyConfig};
    use crate::numerics::Activation;

    fn tiny() -> TinyBackend {
        TinyBackend::new(TinyConfig {
            vocab: 12,
            dim: 4,
            max_query: 2,
            max_doc: 4,
            max_history: 3,
            ..TinyConfig::default()
        })
        .unwrap()
    }

    fn item(id: usize, docs: Vec<Document>) -> TrainingItem {
        TrainingItem {
            id: id.to_string(),
            query: Query::new(vec![1, 2]).unwrap(),
            answer: vec![5, 6, 0],
            docs,
        }
    }

    fn labelled(id: usize) -> TrainingItem {
        item(
            id,
            vec![
                Document::new(3, vec![1, 2, 5, 6, 0]).with_relevance(1),
                Document::new(9, vec![1, 4, 7, 0]).with_relevance(0),
            ],
        )
    }

    #[test]
    fn single_document_loss_is_nll() {
        let b = tiny();
        let head = PriorHead::random(4, Activation::Tanh, 5);
        let it = item(0, vec![Document::new(3, vec![1, 2, 5, 6, 0])]);
        let loss = beft_loss(&it, &b, &head).unwrap();
        let mut nll = 0.0;
        for j in 0..it.answer.len() {
            nll -= crate::backend::ScorerBackend::next_token_logdist(&b, &it.query, &it.docs[0], &it.answer[..j])
                .unwrap()
                .values()[it.answer[j] as usize];
        }
        assert!((loss - nll).abs() < 1e-12);
    }

    #[test]
    fn loss_is_order_free() {
        let b = tiny();
        let head = PriorHead::random(4, Activation::Tanh, 5);
        let it = labelled(0);
        let mut rev = it.clone();
        rev.docs.reverse();
        let a = beft_loss(&it, &b, &head).unwrap();
        assert!((a - beft_loss(&rev, &b, &head).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_ln2_prior_loss() {
        let head = PriorHead::zeros(4, Activation::Tanh);
        let v = prior_loss(&[labelled(0), labelled(1)], &tiny(), &head).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn prior_loss_needs_labels() {
        let head = PriorHead::zeros(4, Activation::Tanh);
        let it = item(0, vec![Document::new(3, vec![1])]);
        assert!(prior_loss(&[it], &tiny(), &head).is_err());
    }

    #[test]
    fn appended_null_document_trains_with_prior_loss() {
        let items: Vec<_> = (0..8).map(labelled).collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            null_rate: 0.5,
            include_null_doc: true,
            include_prior_loss: true,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&items, tiny(), PriorHead::random(4, Activation::Tanh, 1), &config).unwrap();
        let first = &out.curve[0];
        assert!(first.mean_loss.is_finite());
        assert!(first.prior_loss.unwrap() > 0.0);
    }

    #[test]
    fn augmentation_extremes() {
        let items: Vec<_> = (0..20).map(labelled).collect();
        assert_eq!(augment_with_null(&items, 0.0, 1).unwrap(), items);
        let all = augment_with_null(&items, 1.0, 1).unwrap();
        for it in &all {
            assert!(it.docs[0].is_null && it.docs[0].is_relevant());
            assert!(!it.has_gold_evidence());
        }
        assert_eq!(augment_with_null(&items, 0.5, 9).unwrap(), augment_with_null(&items, 0.5, 9).unwrap());
        let unlabeled = vec![item(0, vec![Document::new(3, vec![1])])];
        assert!(augment_with_null(&unlabeled, 0.5, 1).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let items: Vec<_> = (0..8).map(labelled).collect();
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                lr: 0.0,
                prior_lr: Some(0.0),
                epochs: 2,
                batch_size: 3,
                include_prior_loss: true,
                optimizer,
                ..TrainConfig::default()
            };
            let b = tiny();
            let head = PriorHead::random(4, Activation::Tanh, 2);
            let out = train(&items, b.clone(), head.clone(), &cfg).unwrap();
            assert_eq!(out.backend, b);
            assert_eq!(out.head, head);
            assert_eq!(out.curve.len(), 2);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let items: Vec<_> = (0..16).map(labelled).collect();
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || train(&items, tiny(), PriorHead::random(4, Activation::Tanh, 2), &cfg).unwrap();
        let a = run();
        assert!(a.curve.last().unwrap().mean_loss < a.curve[0].mean_loss);
        assert_eq!(a.backend, run().backend);
    }

    #[test]
    fn wrong_k_is_rejected() {
        let items = vec![item(0, vec![Document::new(3, vec![1]).with_relevance(1)])];
        let r = train(&items, tiny(), PriorHead::zeros(4, Activation::Tanh), &TrainConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn curve_csv_format() {
        let csv = curve_csv(&[EpochStats { epoch: 0, mean_loss: 1.5, prior_loss: None }]);
        assert_eq!(csv, "epoch,mean_loss,prior_loss\n0,1.5,\n");
    }
}
