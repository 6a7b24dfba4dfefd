//! Decoder properties: order invariance, degenerate ensembles, posterior
//! validity and pruning.

mod common;

use berag::backend::{Document, PriorHead, Query, TinyBackend, TinyConfig, TokenId};
use berag::decoder::{
    berag_decode, berag_decode_with_prior, concat_decode, single_doc_decode, DecodeConfig, EnsembleState,
};
use berag::numerics::{log_sum_exp, Activation, LogDistribution};
use berag::BeragError;
use common::{random_instance, rng, Scripted};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny(vocab: usize, seed: u64) -> TinyBackend {
    let mut b = TinyBackend::new(TinyConfig {
        vocab,
        dim: 8,
        seed,
        ..TinyConfig::default()
    })
    .unwrap();
    // the attention and match tables start at zero; give them structure
    let mut r = rng(seed ^ 0x5eed);
    for p in berag::backend::TrainableBackend::parameters_mut(&mut b) {
        for x in p.value.data_mut() {
            *x += r.random_range(-0.5..0.5);
        }
    }
    b
}

fn random_docs(r: &mut impl Rng, k: usize, vocab: usize) -> Vec<Document> {
    let mut ids: Vec<u64> = (1..=200).collect();
    ids.shuffle(r);
    ids[..k]
        .iter()
        .map(|&id| {
            let len = r.random_range(2..12);
            Document::new(id, (0..len).map(|_| r.random_range(1..vocab) as TokenId).collect())
        })
        .collect()
}

#[test]
fn permutations_give_identical_tokens_and_permuted_posteriors() {
    let b = tiny(24, 1);
    let head = PriorHead::random(8, Activation::Tanh, 2);
    let mut r = rng(3);
    for _ in 0..40 {
        let k = r.random_range(2..=20);
        let docs = random_docs(&mut r, k, 24);
        let q = Query::new(vec![r.random_range(1..24), r.random_range(1..24)]).unwrap();
        for pruning in [false, true] {
            let cfg = DecodeConfig {
                k,
                top_p_pruning: pruning,
                ..DecodeConfig::default()
            };
            let base = berag_decode(&q, &docs, &b, &head, &cfg).unwrap();
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut r);
                let shuffled: Vec<Document> = perm.iter().map(|&i| docs[i].clone()).collect();
                let out = berag_decode(&q, &shuffled, &b, &head, &cfg).unwrap();
                assert_eq!(out.tokens, base.tokens);
                for (s, t) in out.trace.steps.iter().zip(&base.trace.steps) {
                    assert_eq!(s.active, t.active);
                    for (pos, &i) in perm.iter().enumerate() {
                        assert_eq!(s.posterior[pos].to_bits(), t.posterior[i].to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn single_document_ensemble_is_plain_decoding() {
    let b = tiny(24, 4);
    let head = PriorHead::random(8, Activation::Tanh, 5);
    let mut r = rng(6);
    for _ in 0..50 {
        let docs = random_docs(&mut r, 1, 24);
        let q = Query::new(vec![r.random_range(1..24)]).unwrap();
        let cfg = DecodeConfig {
            k: 1,
            ..DecodeConfig::default()
        };
        let ens = berag_decode(&q, &docs, &b, &head, &cfg).unwrap();
        let plain = single_doc_decode(&q, &docs[0], &b, cfg.max_new_tokens, cfg.eos).unwrap();
        assert_eq!(ens.tokens, plain);
        let concat = concat_decode(&q, &docs, &b, &cfg).unwrap();
        assert_eq!(concat.tokens, plain);
    }
}

#[test]
fn one_hot_prior_is_that_documents_decode() {
    let b = tiny(24, 7);
    let mut r = rng(8);
    for _ in 0..50 {
        let k = r.random_range(2..=6);
        let docs = random_docs(&mut r, k, 24);
        let q = Query::new(vec![r.random_range(1..24)]).unwrap();
        let hot = r.random_range(0..k);
        let prior =
            LogDistribution::new((0..k).map(|i| if i == hot { 0.0 } else { f64::NEG_INFINITY }).collect()).unwrap();
        let cfg = DecodeConfig {
            k,
            ..DecodeConfig::default()
        };
        let ens = berag_decode_with_prior(&q, &docs, &b, &prior, &cfg).unwrap();
        let plain = single_doc_decode(&q, &docs[hot], &b, cfg.max_new_tokens, cfg.eos).unwrap();
        assert_eq!(ens.tokens, plain);
        for s in &ens.trace.steps {
            assert_eq!(s.posterior[hot], 1.0);
        }
    }
}

#[test]
fn all_zero_likelihood_is_degenerate() {
    let b = Scripted::new(2).with_probs(1, &[&[1.0, 0.0]]).with_probs(2, &[&[1.0, 0.0]]);
    let mut state = EnsembleState::from_log_prior(vec![1, 2], &LogDistribution::uniform(2).unwrap()).unwrap();
    let q = Query::new(vec![1]).unwrap();
    let per_doc: Vec<_> = [1, 2]
        .iter()
        .map(|&i| berag::backend::ScorerBackend::next_token_logdist(&b, &q, &Document::new(i, vec![1]), &[]).unwrap())
        .collect();
    assert!(matches!(state.update_posterior(1, &per_doc), Err(BeragError::Degenerate(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posterior_stays_normalized_and_pruning_keeps_mass(seed in any::<u64>(), pruning in any::<bool>()) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 12, 6, 12);
        let k = inst.docs.len();
        let cfg = DecodeConfig { k, top_p_pruning: pruning, eos: 0, max_new_tokens: 6, ..DecodeConfig::default() };
        let out = berag_decode_with_prior(&inst.query, &inst.docs, &inst.backend, &inst.log_prior, &cfg).unwrap();
        let mut prev_active = k;
        for s in &out.trace.steps {
            let active: Vec<f64> = s.log_posterior.iter().copied().filter(|v| *v > f64::NEG_INFINITY).collect();
            prop_assert!(log_sum_exp(&s.log_posterior).unwrap().abs() < 1e-9);
            prop_assert!(s.active.len() <= prev_active);
            prop_assert!(active.len() <= s.active.len());
            prop_assert_eq!(s.tokens_scored, prev_active);
            if !pruning {
                prop_assert_eq!(s.active.len(), k);
            }
            prev_active = s.active.len();
        }
    }

    #[test]
    fn pruning_keeps_the_smallest_sufficient_prefix(probs in prop::collection::vec(0.001f64..1.0, 1..30)) {
        let k = probs.len();
        let z: f64 = probs.iter().sum();
        let prior = LogDistribution::new(probs.iter().map(|p| (p / z).ln()).collect()).unwrap();
        let ids: Vec<u64> = (1..=k as u64).collect();
        let mut state = EnsembleState::from_log_prior(ids, &prior).unwrap();
        state.prune_top_p(k);
        let p = 1.0 - 1.0 / (2.0 * k as f64);
        let kept: f64 = state.active_indices().iter().map(|&i| probs[i] / z).sum();
        prop_assert!(kept >= p - 1e-12);
        // dropping the weakest survivor would fall below the threshold
        let weakest = state.active_indices().iter().map(|&i| probs[i] / z).fold(f64::INFINITY, f64::min);
        prop_assert!(kept - weakest < p + 1e-12);
    }
}
