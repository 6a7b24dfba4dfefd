//! Decoding latency and attention-cost measurements.

use serde::Serialize;

use super::eval::{decode_item, Strategy};
use crate::backend::{PriorHead, ScorerBackend, TokenId};
use crate::decoder::{DecodeConfig, DecodeTrace};
use crate::error::{usage, BeragError, Result};
use crate::training::TrainingItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchVariant {
    pub strategy: Strategy,
    pub k: usize,
    pub pruning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: BenchVariant,
    pub items: usize,
    pub out_of_length: usize,
    /// Mean wall time per generated token after the first.
    pub ms_per_token: Option<f64>,
    pub ttft_ms: Option<f64>,
    /// Mean documents scored per generated token.
    pub mean_active: f64,
    pub mean_prefill_pairs: f64,
    pub mean_decode_pairs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Per variant, per item: decoded tokens (`None` when out of length).
    #[serde(skip)]
    pub answers: Vec<Vec<Option<Vec<TokenId>>>>,
    #[serde(skip)]
    pub traces: Vec<Vec<Option<DecodeTrace>>>,
}

impl BenchResult {
    /// `strategy,k,pruning,items,ms_per_token,ttft_ms,mean_active,mean_prefill_pairs,mean_decode_pairs` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "strategy,k,pruning,items,out_of_length,ms_per_token,ttft_ms,mean_active,mean_prefill_pairs,mean_decode_pairs\n",
        );
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.variant.strategy.name(),
                r.variant.k,
                r.variant.pruning,
                r.items,
                r.out_of_length,
                f(r.ms_per_token),
                f(r.ttft_ms),
                r.mean_active,
                r.mean_prefill_pairs,
                r.mean_decode_pairs
            ));
        }
        s
    }
}

/// Decodes every item with every variant, interleaving variants item by
/// item so slow drifts in machine load hit all of them alike. The first
/// `warmup` items are decoded once beforehand and not measured.
pub fn bench_latency<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    items: &[TrainingItem],
    variants: &[BenchVariant],
    base: &DecodeConfig,
    warmup: usize,
) -> Result<BenchResult> {
    if variants.is_empty() {
        return Err(usage("no benchmark variants"));
    }
    let configs: Vec<DecodeConfig> = variants
        .iter()
        .map(|v| DecodeConfig {
            k: v.k,
            top_p_pruning: v.pruning,
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let run = |it: &TrainingItem, v: &BenchVariant, c: &DecodeConfig| match decode_item(backend, head, it, v.strategy, c) {
        Ok(out) => Ok(Some(out)),
        Err(BeragError::OutOfLength { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    for it in items.iter().take(warmup) {
        for (v, c) in variants.iter().zip(&configs) {
            run(it, v, c)?;
        }
    }

    let mut answers = vec![Vec::with_capacity(items.len()); variants.len()];
    let mut traces = vec![Vec::with_capacity(items.len()); variants.len()];
    for it in items {
        for (i, (v, c)) in variants.iter().zip(&configs).enumerate() {
            let out = run(it, v, c)?;
            answers[i].push(out.as_ref().map(|o| o.tokens.clone()));
            traces[i].push(out.map(|o| o.trace));
        }
    }

    let rows = variants
        .iter()
        .zip(&traces)
        .map(|(v, ts)| {
            let ok: Vec<&DecodeTrace> = ts.iter().flatten().collect();
            let n = ok.len().max(1) as f64;
            let later: Vec<u128> = ok.iter().flat_map(|t| t.steps.iter().skip(1).map(|s| s.elapsed.as_nanos())).collect();
            BenchRow {
                variant: *v,
                items: ok.len(),
                out_of_length: ts.len() - ok.len(),
                ms_per_token: (!later.is_empty()).then(|| later.iter().sum::<u128>() as f64 / later.len() as f64 / 1e6),
                ttft_ms: (!ok.is_empty())
                    .then(|| ok.iter().map(|t| t.time_to_first_token().as_nanos()).sum::<u128>() as f64 / n / 1e6),
                mean_active: ok.iter().map(|t| t.mean_active()).sum::<f64>() / n,
                mean_prefill_pairs: ok.iter().map(|t| t.prefill_pairs as f64).sum::<f64>() / n,
                mean_decode_pairs: ok.iter().map(|t| t.decode_pairs() as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(BenchResult { rows, answers, traces })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(usage("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan() || *v <= 0.0) {
        return Err(usage("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(usage("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes_of_power_laws() {
        let xs = [10.0, 30.0, 50.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((loglog_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }
}
