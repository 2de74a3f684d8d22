//! Prediction-log data model.
//!
//! A log is UTF-8 JSON lines, one [`TokenRecord`] per decoding step. Each
//! record carries a sparse next-token distribution (top-K `entries` plus the
//! `rest_mass` spread uniformly over the unlisted tokens), the gold token, and
//! optionally the attention-derived inputs used by the recalibrator.
//! Consecutive records with the same `seq_id` form a [`SequenceRecord`].

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize};

use crate::accum::ExactSum;
use crate::error::DataError;

/// Tolerance on `Σ entries + rest_mass = 1` and on attention normalization.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Attention entropy (nats) and input coverage for one decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFeatures {
    pub entropy: f64,
    pub coverage: f64,
}

/// One decoding step: the model's next-token distribution conditioned on the
/// gold prefix, the gold token, and optional attention information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    #[serde(deserialize_with = "string_or_number")]
    pub seq_id: String,
    /// 1-based step index.
    pub t: u32,
    pub vocab_size: usize,
    pub eos_id: u32,
    pub gold_id: u32,
    pub entries: Vec<(u32, f64)>,
    pub rest_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cum_attention: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<StepFeatures>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        U(u64),
        I(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::U(u) => u.to_string(),
        Id::I(i) => i.to_string(),
    })
}

impl TokenRecord {
    /// Builds a record from a dense distribution, listing every token with
    /// non-zero probability and leaving `rest_mass` at zero.
    pub fn from_dense(seq_id: impl Into<String>, t: u32, eos_id: u32, gold_id: u32, probs: &[f64]) -> Self {
        let entries = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as u32, p))
            .collect();
        TokenRecord {
            seq_id: seq_id.into(),
            t,
            vocab_size: probs.len(),
            eos_id,
            gold_id,
            entries,
            rest_mass: 0.0,
            attention: None,
            cum_attention: None,
            features: None,
        }
    }

    /// Checks every record invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.t < 1 {
            return Err(DataError::invalid("t", "step index is 1-based"));
        }
        if self.vocab_size == 0 {
            return Err(DataError::invalid("vocab_size", "must be positive"));
        }
        let v = self.vocab_size;
        if self.eos_id as usize >= v {
            return Err(DataError::invalid(
                "eos_id",
                format!("{} is outside vocabulary of size {v}", self.eos_id),
            ));
        }
        if self.gold_id as usize >= v {
            return Err(DataError::invalid(
                "gold_id",
                format!("{} is outside vocabulary of size {v}", self.gold_id),
            ));
        }
        if self.entries.len() > v {
            return Err(DataError::invalid("entries", "more entries than vocabulary"));
        }
        let mut seen = HashSet::with_capacity(self.entries.len());
        let mut total = 0.0;
        for &(id, p) in &self.entries {
            if id as usize >= v {
                return Err(DataError::invalid(
                    "entries",
                    format!("token id {id} is outside vocabulary of size {v}"),
                ));
            }
            if !seen.insert(id) {
                return Err(DataError::invalid("entries", format!("duplicate token id {id}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::invalid(
                    "entries",
                    format!("probability {p} of token {id} is outside [0, 1]"),
                ));
            }
            total += p;
        }
        if !(0.0..=1.0).contains(&self.rest_mass) {
            return Err(DataError::invalid(
                "rest_mass",
                format!("{} is outside [0, 1]", self.rest_mass),
            ));
        }
        let sum = total + self.rest_mass;
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DataError::invalid(
                "entries",
                format!("probabilities plus rest_mass sum to {sum}, expected 1"),
            ));
        }
        if self.entries.len() == v && self.rest_mass > 0.0 {
            return Err(DataError::invalid(
                "rest_mass",
                "all tokens are listed but rest_mass is positive",
            ));
        }
        if let Some(att) = &self.attention {
            check_attention(att)?;
        }
        if let Some(cum) = &self.cum_attention {
            if cum.is_empty() {
                return Err(DataError::invalid("cum_attention", "empty"));
            }
            if cum.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(DataError::invalid("cum_attention", "negative or non-finite entry"));
            }
            if let Some(att) = &self.attention {
                if att.len() != cum.len() {
                    return Err(DataError::invalid(
                        "cum_attention",
                        format!("length {} differs from attention length {}", cum.len(), att.len()),
                    ));
                }
                if cum.iter().zip(att).any(|(c, a)| *c < *a - 1e-12) {
                    return Err(DataError::invalid(
                        "cum_attention",
                        "smaller than attention at some position",
                    ));
                }
            }
        }
        if let Some(f) = &self.features {
            if !f.entropy.is_finite() || f.entropy < 0.0 {
                return Err(DataError::invalid(
                    "features",
                    "entropy must be finite and non-negative",
                ));
            }
            if !(0.0..=1.0).contains(&f.coverage) {
                return Err(DataError::invalid("features", "coverage must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Probability mass each unlisted token receives, before normalization.
    fn rest_share(&self) -> f64 {
        let unlisted = self.vocab_size - self.entries.len();
        if unlisted == 0 {
            0.0
        } else {
            self.rest_mass / unlisted as f64
        }
    }

    fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum::<f64>() + self.rest_mass
    }

    /// Probability of `token` after densification.
    pub fn prob_of(&self, token: u32) -> f64 {
        let total = self.total_mass();
        let p = self
            .entries
            .iter()
            .find(|e| e.0 == token)
            .map_or_else(|| self.rest_share(), |e| e.1);
        p / total
    }

    pub fn gold_prob(&self) -> f64 {
        self.prob_of(self.gold_id)
    }

    pub fn gold_listed(&self) -> bool {
        self.entries.iter().any(|e| e.0 == self.gold_id)
    }

    /// Serializes to one log line (no trailing newline).
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }
}

fn check_attention(att: &[f64]) -> Result<(), DataError> {
    if att.is_empty() {
        return Err(DataError::invalid("attention", "empty"));
    }
    if att.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(DataError::invalid("attention", "negative or non-finite entry"));
    }
    let s: f64 = att.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DataError::invalid("attention", format!("sums to {s}, expected 1")));
    }
    Ok(())
}

/// Parses and validates one log line.
pub fn parse_log_line(line: &str) -> Result<TokenRecord, DataError> {
    let record: TokenRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
        line: 0,
        column: e.column(),
        message: e.to_string(),
    })?;
    record.validate()?;
    Ok(record)
}

/// Expands a record into a probability vector of length `vocab_size`.
///
/// Listed tokens keep their probabilities and each unlisted token receives
/// `rest_mass / (V - K)`. The result is divided by its total so that it sums
/// to one even when the log was only normalized to the validation tolerance.
pub fn densify(record: &TokenRecord) -> Result<Vec<f64>, DataError> {
    let v = record.vocab_size;
    let k = record.entries.len();
    if k == v && record.rest_mass > 0.0 {
        return Err(DataError::Inconsistent(format!(
            "rest_mass {} with no unlisted tokens (V = K = {v})",
            record.rest_mass
        )));
    }
    let mut dense = vec![record.rest_share(); v];
    for &(id, p) in &record.entries {
        dense[id as usize] = p;
    }
    let total = record.total_mass();
    if total != 1.0 {
        dense.iter_mut().for_each(|p| *p /= total);
    }
    Ok(dense)
}

/// A group of equiprobable tokens in a [`CompactDist`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    /// `Some(id)` for a single named token, `None` for the pooled unlisted
    /// tokens.
    pub token: Option<u32>,
    pub prob: f64,
    /// Number of tokens sharing `prob` (1 for named tokens).
    pub count: usize,
}

/// Densified distribution without materializing every unlisted token.
///
/// Listed tokens, the gold token and EOS each get their own slot; all other
/// unlisted tokens share one pooled slot. Every computation over the dense
/// vector that treats equiprobable tokens identically can run on this form.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactDist {
    pub slots: Vec<Slot>,
    pub gold: usize,
    pub eos: usize,
}

impl CompactDist {
    pub fn from_record(record: &TokenRecord) -> Result<Self, DataError> {
        let v = record.vocab_size;
        let k = record.entries.len();
        if k == v && record.rest_mass > 0.0 {
            return Err(DataError::Inconsistent(format!(
                "rest_mass {} with no unlisted tokens (V = K = {v})",
                record.rest_mass
            )));
        }
        let total = record.total_mass();
        let share = record.rest_share() / total;
        let mut slots: Vec<Slot> = record
            .entries
            .iter()
            .map(|&(id, p)| Slot {
                token: Some(id),
                prob: p / total,
                count: 1,
            })
            .collect();
        let find_or_add = |token: u32, slots: &mut Vec<Slot>| -> usize {
            if let Some(i) = slots.iter().position(|s| s.token == Some(token)) {
                i
            } else {
                slots.push(Slot {
                    token: Some(token),
                    prob: share,
                    count: 1,
                });
                slots.len() - 1
            }
        };
        let gold = find_or_add(record.gold_id, &mut slots);
        let eos = find_or_add(record.eos_id, &mut slots);
        let named = slots.len();
        if named < v {
            slots.push(Slot {
                token: None,
                prob: share,
                count: v - named,
            });
        }
        Ok(CompactDist { slots, gold, eos })
    }

    /// Top-1 prediction `(token, probability)`; ties go to the smallest id.
    pub fn argmax(&self, vocab_size: usize) -> (u32, f64) {
        let mut best: Option<(u32, f64)> = None;
        let mut consider = |id: u32, p: f64| match best {
            Some((bid, bp)) if p < bp || (p == bp && id > bid) => {}
            _ => best = Some((id, p)),
        };
        let mut named: Vec<u32> = Vec::new();
        for s in &self.slots {
            if let Some(id) = s.token {
                consider(id, s.prob);
                named.push(id);
            }
        }
        if let Some(pool) = self.slots.iter().find(|s| s.token.is_none()) {
            named.sort_unstable();
            // Smallest id that is not named.
            let mut candidate = 0u32;
            for id in named {
                if id == candidate {
                    candidate += 1;
                } else if id > candidate {
                    break;
                }
            }
            if (candidate as usize) < vocab_size {
                consider(candidate, pool.prob);
            }
        }
        best.expect("distribution has at least one token")
    }
}

/// One source sentence's decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub seq_id: String,
    /// Number of source positions, when attention is available to infer it.
    pub source_len: Option<usize>,
    pub steps: Vec<TokenRecord>,
    pub source: Option<Vec<u32>>,
    pub reference: Option<Vec<u32>>,
}

impl SequenceRecord {
    /// Wraps already-ordered steps, checking `t = 1..n` without gaps and a
    /// consistent `seq_id`.
    pub fn new(steps: Vec<TokenRecord>) -> Result<Self, DataError> {
        let seq_id = steps.first().ok_or(DataError::Empty)?.seq_id.clone();
        for (i, s) in steps.iter().enumerate() {
            if s.seq_id != seq_id {
                return Err(DataError::Sequence {
                    seq_id,
                    reason: format!("step {} belongs to `{}`", i + 1, s.seq_id),
                });
            }
            if s.t as usize != i + 1 {
                return Err(DataError::Sequence {
                    seq_id,
                    reason: format!("expected step t={}, found t={}", i + 1, s.t),
                });
            }
        }
        let source_len = steps
            .iter()
            .find_map(|s| s.attention.as_ref().or(s.cum_attention.as_ref()).map(|a| a.len()));
        Ok(SequenceRecord {
            seq_id,
            source_len,
            steps,
            source: None,
            reference: None,
        })
    }

    /// Attaches source and reference token sequences; the reference must end
    /// with EOS and match the gold tokens step by step.
    pub fn with_texts(mut self, source: Vec<u32>, reference: Vec<u32>) -> Result<Self, DataError> {
        if let Some(last) = self.steps.last() {
            if reference.last() != Some(&last.eos_id) {
                return Err(DataError::Sequence {
                    seq_id: self.seq_id,
                    reason: "reference does not end with EOS".into(),
                });
            }
        }
        let gold: Vec<u32> = self.steps.iter().map(|s| s.gold_id).collect();
        if gold != reference {
            return Err(DataError::Sequence {
                seq_id: self.seq_id,
                reason: "reference disagrees with gold tokens".into(),
            });
        }
        self.source = Some(source);
        self.reference = Some(reference);
        Ok(self)
    }
}

/// Groups records into sequences by consecutive `seq_id`.
pub fn group_sequences(records: Vec<TokenRecord>) -> Result<Vec<SequenceRecord>, DataError> {
    let mut out = Vec::new();
    let mut current: Vec<TokenRecord> = Vec::new();
    for r in records {
        if current.last().is_some_and(|c| c.seq_id != r.seq_id) {
            out.push(SequenceRecord::new(std::mem::take(&mut current))?);
        }
        current.push(r);
    }
    if !current.is_empty() {
        out.push(SequenceRecord::new(current)?);
    }
    Ok(out)
}

/// Flattens sequences back into log order.
pub fn flatten_sequences(seqs: &[SequenceRecord]) -> Vec<TokenRecord> {
    seqs.iter().flat_map(|s| s.steps.iter().cloned()).collect()
}

/// Reads a whole log, failing on the first bad line with its line number.
pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<TokenRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_log_line(&line).map_err(|e| e.at_line(i + 1))?);
    }
    Ok(out)
}

pub fn write_log<W: Write>(mut writer: W, records: &[TokenRecord]) -> Result<(), DataError> {
    for r in records {
        writeln!(writer, "{}", r.to_log_line())?;
    }
    writer.flush()?;
    Ok(())
}

/// Outcome of [`validate_dataset`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationSummary {
    /// Number of valid records.
    pub count: usize,
    pub parse_errors: usize,
    pub validation_errors: usize,
    /// Tally per error kind (`parse`, `invalid:<field>`, ...).
    pub errors: BTreeMap<String, usize>,
    /// Valid records whose gold token is not among the listed entries.
    pub gold_in_tail: usize,
    /// First few error messages with line numbers.
    pub samples: Vec<String>,
}

const MAX_ERROR_SAMPLES: usize = 10;

/// Parses every line, tallying and skipping bad records instead of aborting.
pub fn validate_dataset<I, S>(lines: I) -> ValidationSummary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut summary = ValidationSummary::default();
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        match parse_log_line(line) {
            Ok(r) => {
                summary.count += 1;
                if !r.gold_listed() {
                    summary.gold_in_tail += 1;
                }
            }
            Err(e) => {
                if matches!(e, DataError::Parse { .. }) {
                    summary.parse_errors += 1;
                } else {
                    summary.validation_errors += 1;
                }
                *summary.errors.entry(e.kind()).or_insert(0) += 1;
                if summary.samples.len() < MAX_ERROR_SAMPLES {
                    summary.samples.push(e.at_line(i + 1).to_string());
                }
            }
        }
    }
    summary
}

/// Equal-width confidence bins over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub num_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig { num_bins: 20 }
    }
}

impl BinningConfig {
    pub fn new(num_bins: usize) -> Result<Self, DataError> {
        if num_bins == 0 {
            return Err(DataError::invalid("num_bins", "must be at least 1"));
        }
        Ok(BinningConfig { num_bins })
    }

    /// Bin of `x`: `[b/M, (b+1)/M)`, with the last bin closed at 1.
    pub fn bin_of(&self, x: f64) -> usize {
        let m = self.num_bins;
        ((x * m as f64).floor().max(0.0) as usize).min(m - 1)
    }

    pub fn bounds(&self, b: usize) -> (f64, f64) {
        let m = self.num_bins as f64;
        (b as f64 / m, (b + 1) as f64 / m)
    }
}

/// Per-bin aggregates behind ECE, weighted ECE and Structured ECE.
///
/// Each observation adds a weight, a weighted confidence and a weighted
/// correctness to the bin of its confidence. For top-1 ECE the weight is 1;
/// for weighted ECE it is the token's probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityHistogram {
    binning: BinningConfig,
    weight: Vec<ExactSum>,
    confidence: Vec<ExactSum>,
    accuracy: Vec<ExactSum>,
    count: usize,
}

impl ReliabilityHistogram {
    pub fn new(binning: BinningConfig) -> Self {
        let m = binning.num_bins;
        ReliabilityHistogram {
            binning,
            weight: vec![ExactSum::default(); m],
            confidence: vec![ExactSum::default(); m],
            accuracy: vec![ExactSum::default(); m],
            count: 0,
        }
    }

    /// Adds an observation whose confidence `key` selects the bin; `weight`,
    /// `confidence` and `accuracy` are the already-weighted contributions.
    pub fn add(&mut self, key: f64, weight: f64, confidence: f64, accuracy: f64) {
        let b = self.binning.bin_of(key);
        self.weight[b] += weight;
        self.confidence[b] += confidence;
        self.accuracy[b] += accuracy;
    }

    /// Counts one prediction towards `L`.
    pub fn count_prediction(&mut self) {
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ReliabilityHistogram) {
        assert_eq!(self.binning, other.binning, "merging histograms with different binning");
        for b in 0..self.binning.num_bins {
            self.weight[b].merge(&other.weight[b]);
            self.confidence[b].merge(&other.confidence[b]);
            self.accuracy[b].merge(&other.accuracy[b]);
        }
        self.count += other.count;
    }

    pub fn binning(&self) -> BinningConfig {
        self.binning
    }

    pub fn num_bins(&self) -> usize {
        self.binning.num_bins
    }

    /// Number of predictions `L`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn weight(&self, b: usize) -> f64 {
        self.weight[b].value()
    }

    pub fn confidence_sum(&self, b: usize) -> f64 {
        self.confidence[b].value()
    }

    pub fn accuracy_sum(&self, b: usize) -> f64 {
        self.accuracy[b].value()
    }

    pub fn total_weight(&self) -> f64 {
        let mut s = ExactSum::default();
        self.weight.iter().for_each(|w| s.merge(w));
        s.value()
    }

    /// Fraction of the total weight in bin `b` (`w_b`).
    pub fn mass(&self, b: usize) -> f64 {
        let total = self.total_weight();
        if total > 0.0 {
            self.weight(b) / total
        } else {
            0.0
        }
    }

    /// `Σ_b |accuracy_b − confidence_b|`, the numerator of every ECE variant.
    pub fn gap_sum(&self) -> f64 {
        (0..self.binning.num_bins)
            .map(|b| self.accuracy[b].difference(&self.confidence[b]).abs())
            .sum()
    }
}
