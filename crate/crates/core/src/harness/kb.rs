//! Synthetic knowledge base and retrieval lists for question answering.
//!
//! Vocabulary layout: `0` end of sequence, `1` the "-1" deflection token,
//! `2` filler, then entity tokens, attribute tokens and value tokens. Every
//! (entity, attribute) pair has one value of 1..=`max_value_len` value
//! tokens. Its document reads `[entity, attribute, value.., EOS]`, padded
//! with random value tokens up to `doc_len`. A query is `[entity, attribute]`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::backend::{DocId, Document, OracleBackend, Query, TokenId};
use crate::error::{usage, Result};
use crate::training::TrainingItem;

pub const EOS: TokenId = 0;
pub const NEG: TokenId = 1;
pub const FILLER: TokenId = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    pub vocab: usize,
    pub entities: usize,
    pub attributes: usize,
    pub max_value_len: usize,
    /// Pad documents to this length; `0` leaves them unpadded.
    pub doc_len: usize,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            entities: 20,
            attributes: 8,
            max_value_len: 4,
            doc_len: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistractorLevel {
    /// Random value tokens.
    Random,
    /// Other facts about the same entity.
    SharedEntity,
    /// Other facts sharing the entity or the attribute.
    #[default]
    SharedEntityAttribute,
}

/// 1-based position of the gold document in the list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldRank {
    Fixed(usize),
    /// Uniform over `1..=max`.
    Uniform(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub k: usize,
    pub gold_rank: GoldRank,
    pub gold_present_rate: f64,
    pub distractors: DistractorLevel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            k: 2,
            gold_rank: GoldRank::Uniform(2),
            gold_present_rate: 1.0,
            distractors: DistractorLevel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub entity: TokenId,
    pub attribute: TokenId,
    pub value: Vec<TokenId>,
    pub doc: Document,
}

impl Fact {
    pub fn query(&self) -> Query {
        Query::new(vec![self.entity, self.attribute]).expect("two tokens")
    }

    /// Value followed by the end-of-sequence token.
    pub fn answer(&self) -> Vec<TokenId> {
        let mut a = self.value.clone();
        a.push(EOS);
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticKb {
    config: KbConfig,
    facts: Vec<Fact>,
}

impl SyntheticKb {
    pub fn new(config: KbConfig, seed: u64) -> Result<Self> {
        let c = &config;
        let first_value = 3 + c.entities + c.attributes;
        if c.entities == 0 || c.attributes == 0 || c.max_value_len == 0 {
            return Err(usage("knowledge base needs entities, attributes and values"));
        }
        if first_value + 2 > c.vocab {
            return Err(usage(format!(
                "vocabulary of {} cannot hold {} entities, {} attributes and values",
                c.vocab, c.entities, c.attributes
            )));
        }
        let fact_len = 3 + c.max_value_len;
        if c.doc_len != 0 && c.doc_len < fact_len {
            return Err(usage(format!("doc_len {} below the longest fact ({fact_len})", c.doc_len)));
        }
        let values: Vec<TokenId> = (first_value..c.vocab).map(|t| t as TokenId).collect();
        let capacity: f64 = (1..=c.max_value_len).map(|n| (values.len() as f64).powi(n as i32)).sum();
        if capacity < 2.0 * (c.entities * c.attributes) as f64 {
            return Err(usage("too few value tokens for distinct fact values"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut facts = Vec::with_capacity(c.entities * c.attributes);
        for e in 0..c.entities {
            for a in 0..c.attributes {
                let value = loop {
                    let n = rng.random_range(1..=c.max_value_len);
                    let v: Vec<TokenId> = (0..n).map(|_| *values.choose(&mut rng).expect("values")).collect();
                    if seen.insert(v.clone()) {
                        break v;
                    }
                };
                let (entity, attribute) = ((3 + e) as TokenId, (3 + c.entities + a) as TokenId);
                let mut tokens = vec![entity, attribute];
                tokens.extend(&value);
                tokens.push(EOS);
                while tokens.len() < c.doc_len {
                    tokens.push(*values.choose(&mut rng).expect("values"));
                }
                let doc_id = (facts.len() + 1) as DocId;
                facts.push(Fact {
                    entity,
                    attribute,
                    value,
                    doc: Document::new(doc_id, tokens),
                });
            }
        }
        Ok(Self { config, facts })
    }

    pub fn config(&self) -> &KbConfig {
        &self.config
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    fn value_tokens(&self) -> std::ops::Range<TokenId> {
        let c = &self.config;
        ((3 + c.entities + c.attributes) as TokenId)..(c.vocab as TokenId)
    }

    /// Oracle backend that knows every fact of the base.
    pub fn oracle(&self, epsilon: f64) -> Result<OracleBackend> {
        let max_len = self.facts.iter().map(|f| f.doc.tokens.len()).max().unwrap_or(1);
        let mut o = OracleBackend::new(self.config.vocab, epsilon)?.with_max_len(max_len);
        for f in &self.facts {
            o.register(f.query().tokens(), &f.doc.tokens, &f.answer());
        }
        Ok(o)
    }

    fn distractors(&self, gold: usize, n: usize, level: DistractorLevel, rng: &mut ChaCha8Rng) -> Result<Vec<Document>> {
        let g = &self.facts[gold];
        if level == DistractorLevel::Random {
            let len = if self.config.doc_len > 0 { self.config.doc_len } else { g.doc.tokens.len() };
            let base = self.facts.len() as DocId + 1;
            let mut ids: Vec<DocId> = (0..(4 * n.max(1)) as DocId).map(|i| base + i).collect();
            ids.shuffle(rng);
            return Ok(ids[..n]
                .iter()
                .map(|&id| {
                    let tokens = (0..len).map(|_| rng.random_range(self.value_tokens())).collect();
                    Document::new(id, tokens)
                })
                .collect());
        }
        if n >= self.facts.len() {
            return Err(usage(format!(
                "{n} distractors requested but the base has only {} other facts",
                self.facts.len() - 1
            )));
        }
        let related = |f: &Fact| match level {
            DistractorLevel::SharedEntity => f.entity == g.entity,
            _ => f.entity == g.entity || f.attribute == g.attribute,
        };
        let mut near: Vec<usize> = (0..self.facts.len()).filter(|&i| i != gold && related(&self.facts[i])).collect();
        let mut far: Vec<usize> = (0..self.facts.len()).filter(|&i| i != gold && !related(&self.facts[i])).collect();
        near.shuffle(rng);
        far.shuffle(rng);
        near.extend(far);
        Ok(near[..n].iter().map(|&i| self.facts[i].doc.clone()).collect())
    }
}

/// `items` question-answer items over `kb` with retrieval lists shaped by `scenario`.
pub fn gen_kbqa(kb: &SyntheticKb, scenario: &ScenarioConfig, items: usize, seed: u64) -> Result<Vec<TrainingItem>> {
    let k = scenario.k;
    if k == 0 {
        return Err(usage("retrieval list size k must be at least 1"));
    }
    if !(0.0..=1.0).contains(&scenario.gold_present_rate) {
        return Err(usage("gold_present_rate must be in [0, 1]"));
    }
    let max_rank = match scenario.gold_rank {
        GoldRank::Fixed(r) | GoldRank::Uniform(r) => r,
    };
    if max_rank == 0 || max_rank > k {
        return Err(usage(format!("gold rank {max_rank} outside 1..={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..items)
        .map(|i| {
            let gold = rng.random_range(0..kb.facts.len());
            let present = rng.random::<f64>() < scenario.gold_present_rate;
            let rank = match scenario.gold_rank {
                GoldRank::Fixed(r) => r,
                GoldRank::Uniform(r) => rng.random_range(1..=r),
            };
            let n = if present { k - 1 } else { k };
            let mut docs: Vec<Document> = kb
                .distractors(gold, n, scenario.distractors, &mut rng)?
                .into_iter()
                .map(|d| d.with_relevance(0))
                .collect();
            if present {
                docs.insert(rank - 1, kb.facts[gold].doc.clone().with_relevance(1));
            }
            Ok(TrainingItem {
                id: format!("kb{i:06}"),
                query: kb.facts[gold].query(),
                answer: kb.facts[gold].answer(),
                docs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn facts_are_distinct_and_well_formed() {
        let kb = SyntheticKb::new(KbConfig::default(), 3).unwrap();
        assert_eq!(kb.facts().len(), 160);
        let values: HashSet<_> = kb.facts().iter().map(|f| f.value.clone()).collect();
        assert_eq!(values.len(), 160);
        for f in kb.facts() {
            assert_eq!(&f.doc.tokens[..2], &[f.entity, f.attribute]);
            assert_eq!(*f.doc.tokens.last().unwrap(), EOS);
            assert!(f.doc.tokens.iter().all(|&t| (t as usize) < 64));
        }
    }

    #[test]
    fn padding() {
        let kb = SyntheticKb::new(KbConfig { doc_len: 32, ..KbConfig::default() }, 3).unwrap();
        assert!(kb.facts().iter().all(|f| f.doc.tokens.len() == 32));
        assert!(SyntheticKb::new(KbConfig { doc_len: 5, ..KbConfig::default() }, 3).is_err());
    }

    #[test]
    fn fixed_rank_one() {
        let kb = SyntheticKb::new(KbConfig::default(), 1).unwrap();
        let s = ScenarioConfig { k: 5, gold_rank: GoldRank::Fixed(1), ..ScenarioConfig::default() };
        for it in gen_kbqa(&kb, &s, 50, 2).unwrap() {
            assert_eq!(it.docs.len(), 5);
            assert_eq!(it.docs[0].relevance, Some(1));
            assert!(it.docs[1..].iter().all(|d| d.relevance == Some(0)));
            it.validate().unwrap();
        }
    }

    #[test]
    fn shared_entity_distractors() {
        let kb = SyntheticKb::new(KbConfig::default(), 1).unwrap();
        let s = ScenarioConfig {
            k: 4,
            gold_rank: GoldRank::Fixed(1),
            distractors: DistractorLevel::SharedEntity,
            ..ScenarioConfig::default()
        };
        for it in gen_kbqa(&kb, &s, 20, 2).unwrap() {
            assert!(it.docs.iter().all(|d| d.tokens[0] == it.query.tokens()[0]));
        }
    }

    #[test]
    fn infeasible_configs() {
        let kb = SyntheticKb::new(KbConfig::default(), 1).unwrap();
        let too_many = ScenarioConfig { k: 200, gold_rank: GoldRank::Fixed(1), ..ScenarioConfig::default() };
        assert!(gen_kbqa(&kb, &too_many, 1, 0).is_err());
        let bad_rank = ScenarioConfig { k: 2, gold_rank: GoldRank::Fixed(3), ..ScenarioConfig::default() };
        assert!(gen_kbqa(&kb, &bad_rank, 1, 0).is_err());
        assert!(SyntheticKb::new(KbConfig { vocab: 30, ..KbConfig::default() }, 0).is_err());
    }

    #[test]
    fn random_distractors_have_fresh_ids() {
        let kb = SyntheticKb::new(KbConfig::default(), 1).unwrap();
        let s = ScenarioConfig {
            k: 8,
            gold_rank: GoldRank::Uniform(8),
            distractors: DistractorLevel::Random,
            ..ScenarioConfig::default()
        };
        for it in gen_kbqa(&kb, &s, 20, 2).unwrap() {
            it.validate().unwrap();
            assert!(it.docs.iter().filter(|d| !d.is_relevant()).all(|d| d.doc_id > 160));
        }
    }

    #[test]
    fn oracle_answers_every_fact() {
        let kb = SyntheticKb::new(KbConfig::default(), 4).unwrap();
        let o = kb.oracle(0.0).unwrap();
        for f in kb.facts().iter().take(10) {
            let out = crate::decoder::single_doc_decode(&f.query(), &f.doc, &o, 8, EOS).unwrap();
            assert_eq!(out, f.answer());
        }
    }
}
