//! Needle-in-a-haystack items.
//!
//! An item holds `M` noise documents. In a positive item one of them
//! contains the query pattern and the answer is that document's 1-based
//! index written in decimal digit tokens; in a negative item no document
//! does and the answer is the "-1" token. Items alternate positive and
//! negative, so the ratio is exactly 1:1 for an even count.
//!
//! Vocabulary: `0` EOS, `1` "-1", `2` separator, `3..13` digits, the rest noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kb::{EOS, NEG};
use crate::backend::{DocId, Document, OracleBackend, Query, TokenId};
use crate::error::{usage, Result};
use crate::training::TrainingItem;

pub const SEP: TokenId = 2;
const FIRST_DIGIT: TokenId = 3;
const FIRST_NOISE: TokenId = 13;
pub const NEEDLE_LEN: usize = 3;

pub fn digits(n: usize) -> Vec<TokenId> {
    n.to_string().bytes().map(|b| FIRST_DIGIT + (b - b'0') as TokenId).collect()
}

fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// `items` needle items over `m` documents of `doc_len` tokens.
pub fn gen_needle(m: usize, doc_len: usize, vocab: usize, items: usize, seed: u64) -> Result<Vec<TrainingItem>> {
    if m < 2 {
        return Err(usage("needle task needs at least two documents"));
    }
    if vocab < FIRST_NOISE as usize + 4 {
        return Err(usage(format!("vocabulary {vocab} too small for the needle task")));
    }
    let header = digits(m).len() + 1;
    if doc_len < header + NEEDLE_LEN {
        return Err(usage(format!(
            "doc_len {doc_len} cannot hold a {header}-token header and a {NEEDLE_LEN}-token needle"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng| rng.random_range(FIRST_NOISE..vocab as TokenId);

    (0..items)
        .map(|i| {
            let positive = i % 2 == 0;
            let needle: Vec<TokenId> = (0..NEEDLE_LEN).map(|_| noise(&mut rng)).collect();
            let target = rng.random_range(1..=m);
            let docs = (1..=m)
                .map(|idx| {
                    let mut tokens = digits(idx);
                    tokens.push(SEP);
                    let body_len = doc_len - tokens.len();
                    let body = loop {
                        let mut b: Vec<TokenId> = (0..body_len).map(|_| noise(&mut rng)).collect();
                        if positive && idx == target {
                            let at = rng.random_range(0..=body_len - NEEDLE_LEN);
                            b[at..at + NEEDLE_LEN].copy_from_slice(&needle);
                            // the needle must occur once
                            let mut rest = b.clone();
                            rest[at..at + NEEDLE_LEN].fill(SEP);
                            if !contains(&rest, &needle) {
                                break b;
                            }
                        } else if !contains(&b, &needle) {
                            break b;
                        }
                    };
                    tokens.extend(body);
                    let relevant = positive && idx == target;
                    Document::new(idx as DocId, tokens).with_relevance(u8::from(relevant))
                })
                .collect();
            let mut answer = if positive { digits(target) } else { vec![NEG] };
            answer.push(EOS);
            Ok(TrainingItem {
                id: format!("needle{i:06}"),
                query: Query::new(needle)?,
                answer,
                docs,
            })
        })
        .collect()
}

/// Oracle that knows the needle document of every positive item.
pub fn needle_oracle(items: &[TrainingItem], vocab: usize, epsilon: f64) -> Result<OracleBackend> {
    let mut o = OracleBackend::new(vocab, epsilon)?;
    for it in items {
        if let Some(g) = it.docs.iter().find(|d| d.is_relevant() && !d.is_null) {
            o.register(it.query.tokens(), &g.tokens, &it.answer);
        }
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positives_answer_with_index() {
        let items = gen_needle(10, 12, 64, 20, 5).unwrap();
        for it in items.iter().step_by(2) {
            let g = it.gold_index().unwrap();
            let mut want = digits(g + 1);
            want.push(EOS);
            assert_eq!(it.answer, want);
            assert!(contains(&it.docs[g].tokens, it.query.tokens()));
            let hits = it.docs.iter().filter(|d| contains(&d.tokens, it.query.tokens())).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn negatives_answer_minus_one() {
        let items = gen_needle(10, 12, 64, 20, 5).unwrap();
        for it in items.iter().skip(1).step_by(2) {
            assert_eq!(it.answer, vec![NEG, EOS]);
            assert!(it.gold_index().is_none());
            assert!(it.docs.iter().all(|d| !contains(&d.tokens, it.query.tokens())));
        }
    }

    #[test]
    fn exact_balance_and_determinism() {
        let items = gen_needle(4, 8, 64, 2000, 1).unwrap();
        assert_eq!(items.iter().filter(|i| i.gold_index().is_some()).count(), 1000);
        assert_eq!(items, gen_needle(4, 8, 64, 2000, 1).unwrap());
    }

    #[test]
    fn too_short_docs() {
        assert!(gen_needle(10, 5, 64, 2, 0).is_err());
        assert!(gen_needle(1, 20, 64, 2, 0).is_err());
    }

    #[test]
    fn oracle_reads_needle() {
        let items = gen_needle(10, 12, 64, 4, 5).unwrap();
        let o = needle_oracle(&items, 64, 0.0).unwrap();
        let it = &items[0];
        let g = &it.docs[it.gold_index().unwrap()];
        let out = crate::decoder::single_doc_decode(&it.query, g, &o, 4, EOS).unwrap();
        assert_eq!(out, it.answer);
    }
}
