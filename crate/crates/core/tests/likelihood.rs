//! Sequence likelihood under the ensemble: the incremental posterior path
//! against the brute-force marginal, and the hand-worked two-document case.

mod common;

use berag::backend::{Document, PriorHead, Query};
use berag::decoder::{brute_force_log_marginal, sequence_log_likelihood, sequence_log_likelihood_with_prior};
use berag::numerics::{Activation, LogDistribution};
use berag::training::{beft_loss, beft_loss_gradients};
use common::{item, random_instance, rng, Scripted};

/// Two documents over tokens {a = 0, b = 1}: P(a) = [0.9, 0.1] at step one,
/// P(b) = [0.2, 0.8] at step two.
fn worked_example() -> (Scripted, Vec<Document>) {
    let b = Scripted::new(2)
        .with_probs(1, &[&[0.9, 0.1], &[0.8, 0.2]])
        .with_probs(2, &[&[0.1, 0.9], &[0.2, 0.8]]);
    (b, vec![Document::new(1, vec![1]), Document::new(2, vec![1])])
}

#[test]
fn worked_example_likelihood() {
    let (b, docs) = worked_example();
    let q = Query::new(vec![1]).unwrap();
    let head = PriorHead::zeros(1, Activation::Tanh);
    let ll = sequence_log_likelihood(&q, &[0, 1], &docs, &b, &head).unwrap();
    // 0.5·0.9·0.2 + 0.5·0.1·0.8
    let brute: f64 = 0.5 * 0.9 * 0.2 + 0.5 * 0.1 * 0.8;
    assert!((ll - brute.ln()).abs() < 1e-12);
    assert!((ll - 0.13f64.ln()).abs() < 1e-12);
    // incremental factors: mixture 0.5 at step one, 0.26 at step two
    assert!((ll - (0.5f64.ln() + 0.26f64.ln())).abs() < 1e-12);
}

#[test]
fn worked_example_beft_loss() {
    let (b, docs) = worked_example();
    let head = PriorHead::zeros(1, Activation::Tanh);
    let it = item("w", vec![1], vec![0, 1], docs);
    let loss = beft_loss(&it, &b, &head).unwrap();
    assert!((loss - (-(0.13f64.ln()))).abs() < 1e-12);
    assert!((loss - 2.0402208285265546).abs() < 1e-12);
}

#[test]
fn single_document_loss_is_plain_nll() {
    let b = Scripted::new(3).with_probs(5, &[&[0.2, 0.3, 0.5], &[0.6, 0.3, 0.1]]);
    let head = PriorHead::random(1, Activation::Tanh, 3);
    let it = item("s", vec![1], vec![2, 1], vec![Document::new(5, vec![1])]);
    let g = beft_loss_gradients(&it, &b, &head).unwrap();
    assert!((g.value - (-(0.5f64.ln() + 0.3f64.ln()))).abs() < 1e-12);
    // a single document's prior is 1 whatever the head says
    assert!(g.head.iter().all(|t| t.data().iter().all(|v| v.abs() < 1e-12)));
}

#[test]
fn one_hot_prior_equals_that_documents_likelihood() {
    let (b, docs) = worked_example();
    let q = Query::new(vec![1]).unwrap();
    let one_hot = LogDistribution::new(vec![0.0, f64::NEG_INFINITY]).unwrap();
    let ll = sequence_log_likelihood_with_prior(&q, &[0, 1], &docs, &b, &one_hot).unwrap();
    assert_eq!(ll, 0.9f64.ln() + 0.2f64.ln());
}

#[test]
fn single_token_single_document() {
    let b = Scripted::new(4).with_probs(9, &[&[0.1, 0.2, 0.3, 0.4]]);
    let q = Query::new(vec![1]).unwrap();
    let prior = LogDistribution::new(vec![0.0]).unwrap();
    let ll = sequence_log_likelihood_with_prior(&q, &[2], &[Document::new(9, vec![1])], &b, &prior).unwrap();
    assert_eq!(ll, 0.3f64.ln());
}

#[test]
fn incremental_matches_brute_force_on_random_instances() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let inst = random_instance(&mut r, 5, 6, 16);
        let inc =
            sequence_log_likelihood_with_prior(&inst.query, &inst.answer, &inst.docs, &inst.backend, &inst.log_prior)
                .unwrap();
        let brute =
            brute_force_log_marginal(&inst.query, &inst.answer, &inst.docs, &inst.backend, &inst.log_prior).unwrap();
        worst = worst.max(((inc - brute) / brute).abs());
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn zero_probability_answer_is_neg_infinity() {
    let b = Scripted::new(2).with_probs(1, &[&[1.0, 0.0]]);
    let q = Query::new(vec![1]).unwrap();
    let prior = LogDistribution::new(vec![0.0]).unwrap();
    let ll = sequence_log_likelihood_with_prior(&q, &[1, 0], &[Document::new(1, vec![1])], &b, &prior).unwrap();
    assert_eq!(ll, f64::NEG_INFINITY);
}
