//! Exact match, deflection and Strict RAG scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kb::{EOS, NEG};
use crate::backend::{prior_logits, PriorHead, ScorerBackend, TokenId};
use crate::decoder::{berag_decode, concat_decode, DecodeConfig, DecodeOutput, DecodeTrace};
use crate::error::{BeragError, Result};
use crate::training::TrainingItem;

/// A count of hits over a count of trials, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn record(&mut self, hit: bool) {
        self.num += u64::from(hit);
        self.den += 1;
    }

    /// `None` for 0/0.
    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    /// `1 - self`, exactly.
    pub fn complement(&self) -> Self {
        Self::new(self.den - self.num, self.den)
    }
}

/// Deflection outcomes; the positive class is "gold document absent".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fneg += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn f1(&self) -> Option<f64> {
        let den = 2 * self.tp + self.fp + self.fneg;
        (den > 0).then(|| (2 * self.tp) as f64 / den as f64)
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::new(self.tp + self.tn, self.tp + self.tn + self.fp + self.fneg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Berag,
    Concat,
    /// Deflects on every item without decoding.
    AllDeflect,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Berag => "berag",
            Strategy::Concat => "concat",
            Strategy::AllDeflect => "all_deflect",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ItemOutcome {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub exact_match: bool,
    pub deflected: bool,
    /// 1-based position of the gold document within the first `k`.
    pub gold_position: Option<usize>,
    pub out_of_length: bool,
    pub trace: Option<DecodeTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub k: usize,
    pub items: usize,
    /// Items the concatenated baseline could not fit; excluded from every metric.
    pub out_of_length: usize,
    pub exact_match: Ratio,
    pub recall: Ratio,
    pub strict_rag: Ratio,
    pub deflection: Confusion,
    /// Exact match by gold position `1..=k`.
    pub per_position: Vec<Ratio>,
    pub ms_per_token: Option<f64>,
    pub ttft_ms: Option<f64>,
    pub mean_active: Option<f64>,
    pub prefill_pairs: u64,
    pub decode_pairs: u64,
}

impl EvalReport {
    /// `metric,value,numerator,denominator` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,numerator,denominator\n");
        let mut ratio = |name: &str, r: Ratio| {
            let v = r.value().map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{name},{v},{},{}\n", r.num, r.den));
        };
        ratio("exact_match", self.exact_match);
        ratio(&format!("recall_at_{}", self.k), self.recall);
        ratio("strict_rag", self.strict_rag);
        ratio("deflection_accuracy", self.deflection.accuracy());
        for (p, r) in self.per_position.iter().enumerate() {
            ratio(&format!("em_at_position_{}", p + 1), *r);
        }
        let c = self.deflection;
        let mut plain = |name: &str, v: Option<f64>| {
            s.push_str(&format!("{name},{},,\n", v.map(|v| v.to_string()).unwrap_or_default()));
        };
        plain("deflection_f1", c.f1());
        plain("ms_per_token", self.ms_per_token);
        plain("ttft_ms", self.ttft_ms);
        plain("mean_active_docs", self.mean_active);
        s.push_str(&format!("deflection_tp,{},,\n", c.tp));
        s.push_str(&format!("deflection_fp,{},,\n", c.fp));
        s.push_str(&format!("deflection_fn,{},,\n", c.fneg));
        s.push_str(&format!("deflection_tn,{},,\n", c.tn));
        s.push_str(&format!("prefill_pairs,{},,\n", self.prefill_pairs));
        s.push_str(&format!("decode_pairs,{},,\n", self.decode_pairs));
        s.push_str(&format!("items,{},,\n", self.items));
        s.push_str(&format!("out_of_length,{},,\n", self.out_of_length));
        s
    }
}

/// 1-based position of the first non-empty relevant document among the first `k`.
pub fn gold_position(item: &TrainingItem, k: usize) -> Option<usize> {
    item.docs
        .iter()
        .take(k)
        .position(|d| d.is_relevant() && !d.is_null)
        .map(|p| p + 1)
}

/// Fraction of items whose gold document is among the first `k`.
pub fn recall_at_k(items: &[TrainingItem], k: usize) -> Ratio {
    let mut r = Ratio::default();
    for it in items {
        r.record(gold_position(it, k).is_some());
    }
    r
}

/// Decodes one item with `strategy`.
pub fn decode_item<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    item: &TrainingItem,
    strategy: Strategy,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    match strategy {
        Strategy::Berag => berag_decode(&item.query, &item.docs, backend, head, config),
        Strategy::Concat => {
            let mut out = concat_decode(&item.query, &item.docs, backend, config)?;
            out.deflected = config.deflection && out.tokens.first() == Some(&NEG);
            Ok(out)
        }
        Strategy::AllDeflect => Ok(DecodeOutput {
            tokens: vec![NEG, EOS],
            trace: DecodeTrace::default(),
            deflected: true,
        }),
    }
}

fn outcome<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    item: &TrainingItem,
    strategy: Strategy,
    config: &DecodeConfig,
) -> Result<ItemOutcome> {
    let gold_position = gold_position(item, config.k);
    let tag = |e: BeragError| BeragError::Item {
        id: item.id.clone(),
        source: Box::new(e),
    };
    match decode_item(backend, head, item, strategy, config) {
        Ok(out) => Ok(ItemOutcome {
            id: item.id.clone(),
            exact_match: out.tokens == item.answer,
            tokens: out.tokens,
            deflected: out.deflected,
            gold_position,
            out_of_length: false,
            trace: (strategy != Strategy::AllDeflect).then_some(out.trace),
        }),
        Err(BeragError::OutOfLength { .. }) => Ok(ItemOutcome {
            id: item.id.clone(),
            tokens: Vec::new(),
            exact_match: false,
            deflected: false,
            gold_position,
            out_of_length: true,
            trace: None,
        }),
        Err(e) => Err(tag(e)),
    }
}

/// Aggregates per-item outcomes into a report.
pub fn summarize(strategy: Strategy, k: usize, outcomes: &[ItemOutcome]) -> EvalReport {
    let mut r = EvalReport {
        strategy,
        k,
        items: outcomes.len(),
        out_of_length: 0,
        exact_match: Ratio::default(),
        recall: Ratio::default(),
        strict_rag: Ratio::default(),
        deflection: Confusion::default(),
        per_position: vec![Ratio::default(); k],
        ms_per_token: None,
        ttft_ms: None,
        mean_active: None,
        prefill_pairs: 0,
        decode_pairs: 0,
    };
    let (mut tpot_ns, mut tpot_n, mut ttft_ns, mut active_sum, mut traced) = (0u128, 0u64, 0u128, 0.0, 0u64);
    for o in outcomes {
        if o.out_of_length {
            r.out_of_length += 1;
            continue;
        }
        let present = o.gold_position.is_some();
        r.exact_match.record(o.exact_match);
        r.recall.record(present);
        r.strict_rag.record(if present { !o.deflected && o.exact_match } else { o.deflected });
        r.deflection.record(o.deflected, !present);
        if let Some(p) = o.gold_position {
            r.per_position[p - 1].record(o.exact_match);
        }
        if let Some(t) = &o.trace {
            traced += 1;
            r.prefill_pairs += t.prefill_pairs;
            r.decode_pairs += t.decode_pairs();
            ttft_ns += t.time_to_first_token().as_nanos();
            active_sum += t.mean_active();
            for s in t.steps.iter().skip(1) {
                tpot_ns += s.elapsed.as_nanos();
                tpot_n += 1;
            }
        }
    }
    if tpot_n > 0 {
        r.ms_per_token = Some(tpot_ns as f64 / tpot_n as f64 / 1e6);
    }
    if traced > 0 {
        r.ttft_ms = Some(ttft_ns as f64 / traced as f64 / 1e6);
        r.mean_active = Some(active_sum / traced as f64);
    }
    r
}

/// Decodes every item (in parallel, results in item order) and scores it.
pub fn evaluate<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    items: &[TrainingItem],
    strategy: Strategy,
    config: &DecodeConfig,
) -> Result<(EvalReport, Vec<ItemOutcome>)> {
    config.validate()?;
    let outcomes: Vec<ItemOutcome> = items
        .par_iter()
        .map(|it| outcome(backend, head, it, strategy, config))
        .collect::<Result<_>>()?;
    Ok((summarize(strategy, config.k, &outcomes), outcomes))
}

/// Accuracy of `prior logit > 0` as a relevance classifier over every
/// labelled document.
pub fn relevance_accuracy<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    items: &[TrainingItem],
) -> Result<Ratio> {
    let mut r = Ratio::default();
    for it in items {
        let logits = prior_logits(head, backend, &it.query, &it.docs)?;
        for (d, s) in it.docs.iter().zip(logits) {
            if let Some(label) = d.relevance {
                r.record((s > 0.0) == (label == 1));
            }
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_arithmetic() {
        let mut c = Confusion::default();
        c.record(true, true);
        c.record(true, false);
        c.record(false, true);
        c.record(false, false);
        assert_eq!(c.f1(), Some(0.5));
        assert_eq!(c.accuracy(), Ratio::new(2, 4));
        assert_eq!(Confusion::default().f1(), None);
    }

    #[test]
    fn ratio_complement() {
        assert_eq!(Ratio::new(3, 8).complement(), Ratio::new(5, 8));
        assert_eq!(Ratio::default().value(), None);
    }
}
