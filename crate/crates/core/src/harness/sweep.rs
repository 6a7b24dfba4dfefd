//! Gold-position sweep: move the gold document into each position bucket
//! and re-evaluate the same items.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::{decode_item, gold_position, Ratio, Strategy};
use crate::backend::{PriorHead, ScorerBackend, TokenId};
use crate::decoder::DecodeConfig;
use crate::error::{usage, BeragError, Result};
use crate::training::TrainingItem;

/// Consecutive 1-based inclusive buckets of `width` positions covering `1..=k`.
pub fn position_buckets(k: usize, width: usize) -> Vec<(usize, usize)> {
    let width = width.max(1);
    (1..=k).step_by(width).map(|lo| (lo, (lo + width - 1).min(k))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    /// Exact match per bucket.
    pub accuracy: Vec<Ratio>,
    /// Items the strategy could not fit in its context, per bucket.
    pub out_of_length: Vec<usize>,
    /// Decoded tokens per bucket, per evaluated item.
    #[serde(skip)]
    pub outputs: Vec<Vec<Vec<TokenId>>>,
}

impl SweepRow {
    /// True when every bucket produced the same tokens for every item.
    pub fn outputs_constant(&self) -> bool {
        self.outputs.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub k: usize,
    pub buckets: Vec<(usize, usize)>,
    pub rows: Vec<SweepRow>,
    /// Items without a gold document in the first `k`, left out.
    pub excluded: usize,
}

impl SweepReport {
    /// `strategy,bucket,accuracy,numerator,denominator` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,bucket,accuracy,numerator,denominator\n");
        for row in &self.rows {
            for ((lo, hi), r) in self.buckets.iter().zip(&row.accuracy) {
                let v = r.value().map(|v| v.to_string()).unwrap_or_default();
                s.push_str(&format!("{},{lo}-{hi},{v},{},{}\n", row.strategy.name(), r.num, r.den));
            }
        }
        s
    }
}

/// For every bucket, swaps each item's gold document to a seeded random
/// position inside the bucket and decodes the first `config.k` documents
/// with each strategy.
pub fn position_sweep<B: ScorerBackend + ?Sized>(
    backend: &B,
    head: &PriorHead,
    items: &[TrainingItem],
    buckets: &[(usize, usize)],
    strategies: &[Strategy],
    config: &DecodeConfig,
    seed: u64,
) -> Result<SweepReport> {
    config.validate()?;
    let k = config.k;
    if buckets.iter().any(|&(lo, hi)| lo == 0 || lo > hi || hi > k) {
        return Err(usage(format!("position buckets must lie within 1..={k}")));
    }
    let usable: Vec<(&TrainingItem, usize)> = items
        .iter()
        .filter_map(|it| gold_position(it, k).map(|p| (it, p - 1)))
        .collect();
    let excluded = items.len() - usable.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placed: Vec<Vec<TrainingItem>> = buckets
        .iter()
        .map(|&(lo, hi)| {
            usable
                .iter()
                .map(|&(it, g)| {
                    let target = rng.random_range(lo..=hi) - 1;
                    let mut moved = it.clone();
                    moved.docs.truncate(k);
                    moved.docs.swap(g, target);
                    moved
                })
                .collect()
        })
        .collect();

    let rows = strategies
        .iter()
        .map(|&strategy| {
            let mut row = SweepRow {
                strategy,
                accuracy: Vec::with_capacity(buckets.len()),
                out_of_length: Vec::with_capacity(buckets.len()),
                outputs: Vec::with_capacity(buckets.len()),
            };
            for bucket_items in &placed {
                let mut acc = Ratio::default();
                let mut ool = 0;
                let mut outs = Vec::with_capacity(bucket_items.len());
                for it in bucket_items {
                    match decode_item(backend, head, it, strategy, config) {
                        Ok(out) => {
                            acc.record(out.tokens == it.answer);
                            outs.push(out.tokens);
                        }
                        Err(BeragError::OutOfLength { .. }) => {
                            ool += 1;
                            outs.push(Vec::new());
                        }
                        Err(e) => return Err(e),
                    }
                }
                row.accuracy.push(acc);
                row.out_of_length.push(ool);
                row.outputs.push(outs);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    Ok(SweepReport {
        k,
        buckets: buckets.to_vec(),
        rows,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets() {
        assert_eq!(position_buckets(20, 4), vec![(1, 4), (5, 8), (9, 12), (13, 16), (17, 20)]);
        assert_eq!(position_buckets(5, 2), vec![(1, 2), (3, 4), (5, 5)]);
    }
}
