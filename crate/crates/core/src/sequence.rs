//! Decoding and sequence-level calibration over an abstract scoring model.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinningConfig, ReliabilityHistogram, NORMALIZATION_TOLERANCE};
use crate::error::{DataError, ModelError};
use crate::metrics::CalibrationReport;

/// One step of an autoregressive model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<S> {
    /// Next-token distribution over the whole vocabulary.
    pub probs: Vec<f64>,
    /// Attention over source positions.
    pub attention: Vec<f64>,
    /// State to pass to the next call (for the prefix extended by any token).
    pub state: S,
}

/// An autoregressive model `Pr(y_t | y_<t, x)`, treated as an opaque callable.
///
/// `step` must be deterministic given the source and prefix.
pub trait ScoringModel: Send + Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> u32;

    fn start(&self, source: &[u32]) -> Result<Self::State, ModelError>;

    fn step(&self, state: &Self::State, prefix: &[u32]) -> Result<StepOutput<Self::State>, ModelError>;
}

fn check_distribution(probs: &[f64], vocab: usize, step: usize) -> Result<(), ModelError> {
    let invalid = |reason: String| ModelError::InvalidDistribution { step, reason };
    if probs.len() != vocab {
        return Err(invalid(format!("length {} != vocabulary size {vocab}", probs.len())));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("negative or non-finite probability".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(invalid(format!("sums to {s}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability divided by length.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 4,
            max_len: 50,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(ModelError::Config(
                "beam width and max length must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, ending with EOS unless cut at `max_len`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Ranking score: `log_prob`, or `log_prob / len` with length normalization.
    pub score: f64,
}

/// Descending score, then lexicographically smaller tokens first.
fn rank(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn hypothesis(tokens: Vec<u32>, log_prob: f64, cfg: &BeamConfig) -> Hypothesis {
    let score = if cfg.length_normalize && !tokens.is_empty() {
        log_prob / tokens.len() as f64
    } else {
        log_prob
    };
    Hypothesis {
        tokens,
        log_prob,
        score,
    }
}

/// Beam search: each live prefix is expanded with its `B` most probable
/// tokens and the best `B` candidates by cumulative log-probability survive.
/// Candidates ending in EOS retire to a finished pool and stop consuming
/// beam slots; live prefixes still open at `max_len` join the pool as they
/// are. Returns the best `B` hypotheses of the pool.
pub fn beam_search<M: ScoringModel>(
    model: &M,
    source: &[u32],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    cfg.validate()?;
    let eos = model.eos_id();
    let vocab = model.vocab_size();
    let width = cfg.beam_width;
    let mut live: Vec<(Vec<u32>, f64, M::State)> = vec![(Vec::new(), 0.0, model.start(source)?)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_len {
        let mut candidates: Vec<(Vec<u32>, f64, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (parent, (prefix, logp, state)) in live.iter().enumerate() {
            let out = model.step(state, prefix)?;
            check_distribution(&out.probs, vocab, step + 1)?;
            let mut order: Vec<usize> = (0..vocab).filter(|&y| out.probs[y] > 0.0).collect();
            order.sort_by(|&a, &b| out.probs[b].total_cmp(&out.probs[a]).then(a.cmp(&b)));
            for &y in order.iter().take(width) {
                let mut tokens = prefix.clone();
                tokens.push(y as u32);
                candidates.push((tokens, logp + out.probs[y].ln(), parent));
            }
            next_states.push(out.state);
        }
        candidates.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        let mut next_live = Vec::with_capacity(width);
        for (tokens, logp, parent) in candidates {
            if tokens.last() == Some(&eos) {
                finished.push(hypothesis(tokens, logp, cfg));
            } else {
                next_live.push((tokens, logp, next_states[parent].clone()));
            }
            if next_live.len() == width {
                break;
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|(t, lp, _)| hypothesis(t, lp, cfg)));
    finished.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    finished.truncate(width);
    Ok(finished)
}

/// Ancestral sampling until EOS or `max_len` tokens.
pub fn sample_sequence<M: ScoringModel, R: Rng + ?Sized>(
    model: &M,
    source: &[u32],
    rng: &mut R,
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    let eos = model.eos_id();
    let mut state = model.start(source)?;
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let out = model.step(&state, &tokens)?;
        check_distribution(&out.probs, model.vocab_size(), tokens.len() + 1)?;
        let dist = WeightedIndex::new(&out.probs).map_err(|e| ModelError::InvalidDistribution {
            step: tokens.len() + 1,
            reason: e.to_string(),
        })?;
        let y = dist.sample(rng) as u32;
        tokens.push(y);
        if y == eos {
            break;
        }
        state = out.state;
    }
    Ok(tokens)
}

/// Removes a trailing EOS, if any.
pub fn strip_eos(tokens: &[u32], eos: u32) -> &[u32] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total.
fn matches(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp()
}

/// Sentence BLEU-4 with add-one smoothing of the 2- to 4-gram precisions.
/// The unigram precision is unsmoothed, so no unigram overlap gives 0.
pub fn sentence_bleu(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (m, total) = matches(candidate, reference, n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    brevity_penalty(candidate.len(), reference.len()) * (log_sum / MAX_ORDER as f64).exp()
}

/// Corpus BLEU-4: n-gram matches and lengths pooled over all pairs, no
/// smoothing.
pub fn corpus_bleu<C, R>(pairs: &[(C, R)]) -> f64
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, r) in pairs {
        let (c, r) = (c.as_ref(), r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_mean = (0..MAX_ORDER)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    brevity_penalty(cand_len, ref_len) * log_mean.exp()
}

/// Default number of samples behind an expected-BLEU estimate.
pub const DEFAULT_BLEU_SAMPLES: usize = 100;

/// Monte Carlo estimate of the BLEU `prediction` would score against
/// references drawn from the model itself. EOS is stripped from the
/// prediction and from every sample before scoring.
pub fn expected_bleu<M: ScoringModel, R: Rng + ?Sized>(
    model: &M,
    source: &[u32],
    prediction: &[u32],
    samples: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if samples == 0 {
        return Err(ModelError::Config("expected BLEU needs at least one sample".into()));
    }
    let eos = model.eos_id();
    let pred = strip_eos(prediction, eos);
    let mut total = 0.0;
    for _ in 0..samples {
        let y = sample_sequence(model, source, rng, max_len)?;
        total += sentence_bleu(pred, strip_eos(&y, eos));
    }
    Ok(total / samples as f64)
}

/// One point of a sequence-calibration plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePoint {
    pub seq_id: String,
    pub expected_bleu: f64,
    pub actual_bleu: f64,
}

/// ECE over (expected BLEU, actual BLEU) pairs, binned by expected BLEU:
/// `Σ_b mass_b · |mean actual_b − mean expected_b|`.
pub fn structured_ece(points: &[(f64, f64)], bins: BinningConfig) -> Result<CalibrationReport, DataError> {
    if points.is_empty() {
        return Err(DataError::Empty);
    }
    let mut h = ReliabilityHistogram::new(bins);
    for &(expected, actual) in points {
        if !(0.0..=1.0).contains(&expected) || !(0.0..=1.0).contains(&actual) {
            return Err(DataError::invalid(
                "points",
                format!("({expected}, {actual}) outside [0, 1]"),
            ));
        }
        h.add(expected, 1.0, expected, actual);
        h.count_prediction();
    }
    Ok(CalibrationReport {
        score: h.gap_sum() / h.count() as f64,
        histogram: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_examples() {
        let a = [1, 2, 3, 4];
        assert_eq!(sentence_bleu(&a, &a), 1.0);
        assert_eq!(sentence_bleu(&[9], &[9]), 1.0);
        assert_eq!(sentence_bleu(&[5, 6], &[1, 2, 3]), 0.0);
        assert_eq!(sentence_bleu(&[], &[1, 2]), 0.0);
        // p1 = 3/4, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = 1.
        let oracle = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        let b = sentence_bleu(&[1, 2, 3, 4], &[1, 2, 3, 5]);
        assert!((b - oracle).abs() < 1e-12);
        assert!((b - 0.6580).abs() < 1e-4);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Candidate is a prefix of the reference: all precisions are 1.
        let b = sentence_bleu(&[1, 2], &[1, 2, 3, 4]);
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_examples() {
        let same = vec![
            (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]),
            (vec![7, 8, 9, 10], vec![7, 8, 9, 10]),
        ];
        assert_eq!(corpus_bleu(&same), 1.0);
        let disjoint = vec![(vec![1, 2, 3, 4], vec![5, 6, 7, 8])];
        assert_eq!(corpus_bleu(&disjoint), 0.0);
        // Single pair with all precisions positive: unsmoothed sentence form.
        let c = [1, 2, 3, 4, 5, 6];
        let r = [1, 2, 3, 4, 5, 9, 9];
        let oracle = (1.0f64 - 7.0 / 6.0).exp() * ((5.0f64 / 6.0) * (4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0)).powf(0.25);
        assert!((corpus_bleu(&[(c, r)]) - oracle).abs() < 1e-12);
    }

    #[test]
    fn structured_ece_examples() {
        let bins = BinningConfig::default();
        let diag = structured_ece(&[(0.1, 0.1), (0.5, 0.5), (0.93, 0.93)], bins).unwrap();
        assert!(diag.score.abs() < 1e-12);
        let off = structured_ece(&[(0.8, 0.6); 5], bins).unwrap();
        assert!((off.score - 0.2).abs() < 1e-12);
        let two = structured_ece(&[(0.3, 0.4), (0.3, 0.4), (0.7, 0.4), (0.7, 0.4)], bins).unwrap();
        assert!((two.score - 0.2).abs() < 1e-12);
        assert_eq!(structured_ece(&[], bins), Err(DataError::Empty));
        assert!(structured_ece(&[(1.2, 0.3)], bins).is_err());
    }

    #[test]
    fn strip_eos_only_trailing() {
        assert_eq!(strip_eos(&[1, 2, 0], 0), &[1, 2]);
        assert_eq!(strip_eos(&[0, 2], 0), &[0, 2]);
        assert_eq!(strip_eos(&[], 0), &[] as &[u32]);
    }
}
