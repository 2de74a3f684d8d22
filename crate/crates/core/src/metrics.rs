//! Token-level calibration metrics.
//!
//! Every metric is a reduction over records into a [`ReliabilityHistogram`]
//! whose sums are order-independent, so results are bit-identical under any
//! record permutation or thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::ExactSum;
use crate::data::{BinningConfig, CompactDist, ReliabilityHistogram, TokenRecord};
use crate::error::DataError;

/// Default attention-entropy split point (nats).
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 1.0;

/// Score together with the histogram it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub score: f64,
    pub histogram: ReliabilityHistogram,
}

fn reduce<F>(records: &[TokenRecord], bins: BinningConfig, accumulate: F) -> Result<ReliabilityHistogram, DataError>
where
    F: Fn(&TokenRecord, &mut ReliabilityHistogram) -> Result<(), DataError> + Sync,
{
    records
        .par_iter()
        .try_fold(
            || ReliabilityHistogram::new(bins),
            |mut h, r| {
                accumulate(r, &mut h)?;
                Ok::<_, DataError>(h)
            },
        )
        .try_reduce(
            || ReliabilityHistogram::new(bins),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )
}

fn add_top1(r: &TokenRecord, h: &mut ReliabilityHistogram) -> Result<(), DataError> {
    let dist = CompactDist::from_record(r)?;
    let (pred, conf) = dist.argmax(r.vocab_size);
    let correct = if pred == r.gold_id { 1.0 } else { 0.0 };
    h.add(conf, 1.0, conf, correct);
    h.count_prediction();
    Ok(())
}

/// Adds `count` tokens of probability `p`; `gold` marks the slot holding the
/// gold token (always a single token).
fn add_weighted(h: &mut ReliabilityHistogram, p: f64, count: usize, gold: bool) {
    if p <= 0.0 || count == 0 {
        return;
    }
    let n = count as f64;
    let acc = if gold { p } else { 0.0 };
    h.add(p, n * p, n * p * p, acc);
}

fn add_all_weighted(r: &TokenRecord, h: &mut ReliabilityHistogram) -> Result<(), DataError> {
    let dist = CompactDist::from_record(r)?;
    for (i, s) in dist.slots.iter().enumerate() {
        add_weighted(h, s.prob, s.count, i == dist.gold);
    }
    h.count_prediction();
    Ok(())
}

fn non_empty(records: &[TokenRecord]) -> Result<(), DataError> {
    if records.is_empty() {
        Err(DataError::Empty)
    } else {
        Ok(())
    }
}

fn score(h: &ReliabilityHistogram, normalizer: f64) -> f64 {
    if normalizer > 0.0 {
        h.gap_sum() / normalizer
    } else {
        0.0
    }
}

/// Top-1 expected calibration error: the prediction is the argmax of the
/// densified distribution and its probability is the confidence.
pub fn ece(records: &[TokenRecord], bins: BinningConfig) -> Result<CalibrationReport, DataError> {
    non_empty(records)?;
    let histogram = reduce(records, bins, add_top1)?;
    Ok(CalibrationReport {
        score: score(&histogram, histogram.count() as f64),
        histogram,
    })
}

/// Weighted ECE: every token probability `P(y)` lands in the bin of `P(y)`
/// with weight `P(y)`, contributing `P(y)·(δ(y = gold) − P(y))` to that
/// bin's signed gap. Zero-probability tokens contribute nothing.
pub fn weighted_ece(records: &[TokenRecord], bins: BinningConfig) -> Result<CalibrationReport, DataError> {
    non_empty(records)?;
    let histogram = reduce(records, bins, add_all_weighted)?;
    Ok(CalibrationReport {
        score: score(&histogram, histogram.count() as f64),
        histogram,
    })
}

/// Mean negative log-likelihood of the gold tokens, in nats per token.
pub fn nll(records: &[TokenRecord]) -> Result<f64, DataError> {
    non_empty(records)?;
    let total = records
        .par_iter()
        .try_fold(ExactSum::default, |mut acc, r| {
            let p = r.gold_prob();
            if !(p > 0.0) {
                return Err(DataError::ZeroGoldProbability {
                    seq_id: r.seq_id.clone(),
                    t: r.t,
                });
            }
            acc += -p.ln();
            Ok(acc)
        })
        .try_reduce(ExactSum::default, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })?;
    Ok(total.value() / records.len() as f64)
}

/// Token class used by [`PartitionSpec::TokenClass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Eos,
    Token(u32),
}

/// How to split predictions into diagnostic groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSpec {
    /// `eos`/`token:<id>` versus `rest`. Top-1 ECE groups records by their
    /// predicted token; weighted ECE groups individual token probabilities.
    TokenClass(TokenClass),
    /// `low` (`a_t < threshold`) versus `high` attention entropy; per record.
    EntropySplit { threshold: f64 },
    /// `tail` (`p < threshold`) versus `head`. Top-1 ECE groups records by
    /// confidence; weighted ECE groups individual token probabilities.
    ConfidenceThreshold { threshold: f64 },
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            PartitionSpec::EntropySplit { threshold } if !(threshold.is_finite() && threshold >= 0.0) => Err(
                DataError::invalid("partition", "entropy threshold must be finite and non-negative"),
            ),
            PartitionSpec::ConfidenceThreshold { threshold } if !(threshold > 0.0 && threshold <= 1.0) => Err(
                DataError::invalid("partition", "confidence threshold must lie in (0, 1]"),
            ),
            _ => Ok(()),
        }
    }

    fn labels(&self) -> [String; 2] {
        match self {
            PartitionSpec::TokenClass(TokenClass::Eos) => ["eos".into(), "rest".into()],
            PartitionSpec::TokenClass(TokenClass::Token(id)) => [format!("token:{id}"), "rest".into()],
            PartitionSpec::EntropySplit { .. } => ["low".into(), "high".into()],
            PartitionSpec::ConfidenceThreshold { .. } => ["tail".into(), "head".into()],
        }
    }
}

/// Metrics of one partition group. `count` is the number of records whose
/// top-1 prediction falls in the group; `mass` is the probability mass behind
/// the weighted ECE. Empty groups report `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub mass: f64,
    pub ece: Option<f64>,
    pub weighted_ece: Option<f64>,
}

#[derive(Clone)]
struct GroupAcc {
    top1: [ReliabilityHistogram; 2],
    weighted: [ReliabilityHistogram; 2],
}

impl GroupAcc {
    fn new(bins: BinningConfig) -> Self {
        let h = || ReliabilityHistogram::new(bins);
        GroupAcc {
            top1: [h(), h()],
            weighted: [h(), h()],
        }
    }

    fn merge(&mut self, other: &GroupAcc) {
        for g in 0..2 {
            self.top1[g].merge(&other.top1[g]);
            self.weighted[g].merge(&other.weighted[g]);
        }
    }
}

fn accumulate_partition(spec: &PartitionSpec, r: &TokenRecord, acc: &mut GroupAcc) -> Result<(), DataError> {
    let dist = CompactDist::from_record(r)?;
    let (pred, conf) = dist.argmax(r.vocab_size);
    let correct = if pred == r.gold_id { 1.0 } else { 0.0 };
    let top1_group = match *spec {
        PartitionSpec::TokenClass(TokenClass::Eos) => usize::from(pred != r.eos_id),
        PartitionSpec::TokenClass(TokenClass::Token(id)) => usize::from(pred != id),
        PartitionSpec::EntropySplit { threshold } => {
            let f = r.features.ok_or_else(|| DataError::MissingFeatures {
                seq_id: r.seq_id.clone(),
                t: r.t,
            })?;
            usize::from(f.entropy >= threshold)
        }
        PartitionSpec::ConfidenceThreshold { threshold } => usize::from(conf >= threshold),
    };
    acc.top1[top1_group].add(conf, 1.0, conf, correct);
    acc.top1[top1_group].count_prediction();

    match *spec {
        PartitionSpec::EntropySplit { .. } => {
            let h = &mut acc.weighted[top1_group];
            for (i, s) in dist.slots.iter().enumerate() {
                add_weighted(h, s.prob, s.count, i == dist.gold);
            }
            h.count_prediction();
        }
        PartitionSpec::TokenClass(class) => {
            let target = match class {
                TokenClass::Eos => r.eos_id,
                TokenClass::Token(id) => id,
            };
            let named = dist.slots.iter().any(|s| s.token == Some(target));
            for (i, s) in dist.slots.iter().enumerate() {
                let gold = i == dist.gold;
                match s.token {
                    Some(id) => {
                        let g = usize::from(id != target);
                        add_weighted(&mut acc.weighted[g], s.prob, 1, gold);
                    }
                    None if !named && (target as usize) < r.vocab_size => {
                        add_weighted(&mut acc.weighted[0], s.prob, 1, false);
                        add_weighted(&mut acc.weighted[1], s.prob, s.count - 1, false);
                    }
                    None => add_weighted(&mut acc.weighted[1], s.prob, s.count, false),
                }
            }
        }
        PartitionSpec::ConfidenceThreshold { threshold } => {
            for (i, s) in dist.slots.iter().enumerate() {
                let g = usize::from(s.prob >= threshold);
                add_weighted(&mut acc.weighted[g], s.prob, s.count, i == dist.gold);
            }
        }
    }
    Ok(())
}

/// Splits predictions into two groups and reports ECE and weighted ECE per
/// group. For record-level splits each group's metrics equal the metrics of
/// the filtered records; for token-level splits the weighted ECE of a group
/// is normalized by the group's probability mass.
pub fn partitioned_metric(
    records: &[TokenRecord],
    spec: &PartitionSpec,
    bins: BinningConfig,
) -> Result<BTreeMap<String, GroupMetrics>, DataError> {
    spec.validate()?;
    non_empty(records)?;
    let acc = records
        .par_iter()
        .try_fold(
            || GroupAcc::new(bins),
            |mut a, r| {
                accumulate_partition(spec, r, &mut a)?;
                Ok::<_, DataError>(a)
            },
        )
        .try_reduce(
            || GroupAcc::new(bins),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )?;
    let record_level = matches!(spec, PartitionSpec::EntropySplit { .. });
    let mut out = BTreeMap::new();
    for (g, label) in spec.labels().into_iter().enumerate() {
        let top1 = &acc.top1[g];
        let weighted = &acc.weighted[g];
        let count = top1.count();
        let mass = weighted.total_weight();
        let weighted_norm = if record_level { weighted.count() as f64 } else { mass };
        out.insert(
            label,
            GroupMetrics {
                count,
                mass,
                ece: (count > 0).then(|| score(top1, count as f64)),
                weighted_ece: (weighted_norm > 0.0).then(|| score(weighted, weighted_norm)),
            },
        );
    }
    Ok(out)
}

/// Head/tail totals at one probability threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadTailRow {
    pub threshold: f64,
    pub tail_conf_sum: f64,
    pub tail_acc_sum: f64,
    pub head_conf_sum: f64,
    pub head_acc_sum: f64,
}

/// For each threshold `T`, totals predicted probability and gold
/// correctness over all densified token probabilities below `T` (tail) and
/// at or above `T` (head).
pub fn head_tail_curve(records: &[TokenRecord], thresholds: &[f64]) -> Result<Vec<HeadTailRow>, DataError> {
    non_empty(records)?;
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(DataError::invalid("thresholds", format!("{t} is outside (0, 1]")));
    }
    let n = thresholds.len();
    type Sums = Vec<[ExactSum; 4]>;
    let sums: Sums = records
        .par_iter()
        .try_fold(
            || vec![[ExactSum::default(); 4]; n],
            |mut acc: Sums, r| {
                let dist = CompactDist::from_record(r)?;
                for (k, &thr) in thresholds.iter().enumerate() {
                    for (i, s) in dist.slots.iter().enumerate() {
                        let base = if s.prob >= thr { 2 } else { 0 };
                        acc[k][base] += s.count as f64 * s.prob;
                        if i == dist.gold {
                            acc[k][base + 1] += 1.0;
                        }
                    }
                }
                Ok::<_, DataError>(acc)
            },
        )
        .try_reduce(
            || vec![[ExactSum::default(); 4]; n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    for j in 0..4 {
                        x[j].merge(&y[j]);
                    }
                }
                Ok(a)
            },
        )?;
    Ok(thresholds
        .iter()
        .zip(sums)
        .map(|(&threshold, s)| HeadTailRow {
            threshold,
            tail_conf_sum: s[0].value(),
            tail_acc_sum: s[1].value(),
            head_conf_sum: s[2].value(),
            head_acc_sum: s[3].value(),
        })
        .collect())
}

/// One row of a reliability table. Empty bins have `None` averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass: f64,
    pub avg_confidence: Option<f64>,
    pub avg_accuracy: Option<f64>,
}

/// Reliability-plot table with one row per bin.
pub fn export_reliability(hist: &ReliabilityHistogram) -> Vec<ReliabilityRow> {
    let binning = hist.binning();
    (0..hist.num_bins())
        .map(|b| {
            let (bin_lo, bin_hi) = binning.bounds(b);
            let w = hist.weight(b);
            let avg = |s: f64| (w > 0.0).then(|| s / w);
            ReliabilityRow {
                bin_lo,
                bin_hi,
                mass: hist.mass(b),
                avg_confidence: avg(hist.confidence_sum(b)),
                avg_accuracy: avg(hist.accuracy_sum(b)),
            }
        })
        .collect()
}
