//! Synthetic translation task with exactly known conditionals.
//!
//! Each source token emits one target token from a small per-token table,
//! one output step per source position, then EOS. Attention at step `t`
//! mixes a one-hot on the aligned source position with a uniform vector, so
//! coverage grows by exactly one position per step. Miscalibration is
//! injected in logit space by [`DistortedModel`], and a fitted
//! [`Calibrator`] can be wrapped around any model with
//! [`RecalibratedModel`].

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinningConfig, SequenceRecord, StepFeatures, TokenRecord};
use crate::error::ModelError;
use crate::features::{attention_entropy, coverage, enrich, FeatureConfig};
use crate::metrics::CalibrationReport;
use crate::recalibrate::Calibrator;
use crate::sequence::{
    beam_search, corpus_bleu, expected_bleu, sample_sequence, sentence_bleu, strip_eos, structured_ece, BeamConfig,
    ScoringModel, SequencePoint, StepOutput,
};

/// Description of a synthetic task. `emissions`, when absent, is generated
/// from `seed`: every source token gets two distinct target tokens with
/// probabilities `primary_prob` and `1 − primary_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub source_vocab: usize,
    /// Target vocabulary size including EOS, which is the last id.
    pub target_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// 0 gives one-hot alignment, 1 uniform attention.
    pub gamma: f64,
    /// Mass spread uniformly over the whole target vocabulary at every step,
    /// so that every token (EOS included) has positive probability.
    pub smoothing: f64,
    pub primary_prob: f64,
    pub seed: u64,
    /// Per source token: `(target token, probability)` pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emissions: Option<Vec<Vec<(u32, f64)>>>,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            source_vocab: 20,
            target_vocab: 21,
            min_len: 4,
            max_len: 8,
            gamma: 0.3,
            smoothing: 0.01,
            primary_prob: 0.7,
            seed: 0,
            emissions: None,
        }
    }
}

/// Known miscalibration applied to a model's step distributions:
/// `softmax(ln p / temperature + eos_bias·(1 − c_t)·[y = EOS])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionSpec {
    pub temperature: f64,
    pub eos_bias: f64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec {
            temperature: 1.0,
            eos_bias: 0.0,
        }
    }
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config("distortion temperature must be positive".into()));
        }
        if !(self.eos_bias >= 0.0 && self.eos_bias.is_finite()) {
            return Err(ModelError::Config("EOS bias must be non-negative".into()));
        }
        Ok(())
    }
}

/// The true conditional model of a [`ToyTaskSpec`].
#[derive(Debug, Clone)]
pub struct TrueModel {
    spec: ToyTaskSpec,
    /// Dense step distribution for each source token.
    rows: Vec<Vec<f64>>,
    /// Distribution once every source position has been emitted.
    eos_row: Vec<f64>,
}

fn config_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}

/// Builds the true model, generating the emission table if needed.
pub fn build_true_model(spec: &ToyTaskSpec) -> Result<TrueModel, ModelError> {
    if spec.source_vocab == 0 || spec.target_vocab < 2 {
        return Err(config_err(
            "need a source token and at least one target token besides EOS",
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(config_err("length range must be non-empty and start at 1 or more"));
    }
    if !(0.0..=1.0).contains(&spec.gamma) || !(0.0..1.0).contains(&spec.smoothing) {
        return Err(config_err("gamma must lie in [0, 1] and smoothing in [0, 1)"));
    }
    let v = spec.target_vocab;
    let eos = (v - 1) as u32;
    let table = match &spec.emissions {
        Some(t) => t.clone(),
        None => generate_emissions(spec)?,
    };
    if table.len() != spec.source_vocab {
        return Err(config_err(format!(
            "emission table has {} rows for {} source tokens",
            table.len(),
            spec.source_vocab
        )));
    }
    let uniform = spec.smoothing / v as f64;
    let mut rows = Vec::with_capacity(table.len());
    for (s, row) in table.iter().enumerate() {
        let total: f64 = row.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 || row.iter().any(|e| e.1 < 0.0 || e.0 as usize >= v) {
            return Err(config_err(format!(
                "emission row {s} is not a distribution over the target vocabulary"
            )));
        }
        let mut dense = vec![uniform; v];
        for &(y, p) in row {
            dense[y as usize] += (1.0 - spec.smoothing) * p;
        }
        rows.push(dense);
    }
    let mut eos_row = vec![uniform; v];
    eos_row[eos as usize] += 1.0 - spec.smoothing;
    Ok(TrueModel {
        spec: spec.clone(),
        rows,
        eos_row,
    })
}

fn generate_emissions(spec: &ToyTaskSpec) -> Result<Vec<Vec<(u32, f64)>>, ModelError> {
    let content = spec.target_vocab - 1;
    if !(0.0..=1.0).contains(&spec.primary_prob) {
        return Err(config_err("primary_prob must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.source_vocab)
        .map(|_| {
            if content == 1 {
                return vec![(0, 1.0)];
            }
            let pick = sample_indices(&mut rng, content, 2);
            vec![
                (pick.index(0) as u32, spec.primary_prob),
                (pick.index(1) as u32, 1.0 - spec.primary_prob),
            ]
        })
        .collect())
}

impl TrueModel {
    pub fn spec(&self) -> &ToyTaskSpec {
        &self.spec
    }

    /// Upper bound on generated output length.
    pub fn max_output_len(&self) -> usize {
        2 * self.spec.max_len + 2
    }

    /// Draws a source sentence.
    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..len)
            .map(|_| rng.gen_range(0..self.spec.source_vocab as u32))
            .collect()
    }

    /// Draws a source sentence and a reference translation from the task.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<u32>, Vec<u32>), ModelError> {
        let source = self.sample_source(rng);
        let reference = sample_sequence(self, &source, rng, self.max_output_len())?;
        Ok((source, reference))
    }

    fn attention(&self, k: usize, pos: usize) -> Vec<f64> {
        let g = self.spec.gamma;
        let mut a = vec![g / k as f64; k];
        a[pos.min(k - 1)] += 1.0 - g;
        a
    }
}

impl ScoringModel for TrueModel {
    type State = Arc<[u32]>;

    fn vocab_size(&self) -> usize {
        self.spec.target_vocab
    }

    fn eos_id(&self) -> u32 {
        (self.spec.target_vocab - 1) as u32
    }

    fn start(&self, source: &[u32]) -> Result<Self::State, ModelError> {
        if source.is_empty() {
            return Err(config_err("empty source sentence"));
        }
        if let Some(s) = source.iter().find(|&&s| s as usize >= self.spec.source_vocab) {
            return Err(config_err(format!("source token {s} outside vocabulary")));
        }
        Ok(source.into())
    }

    fn step(&self, state: &Self::State, prefix: &[u32]) -> Result<StepOutput<Self::State>, ModelError> {
        let pos = prefix.len();
        let k = state.len();
        let probs = if pos < k {
            self.rows[state[pos] as usize].clone()
        } else {
            self.eos_row.clone()
        };
        Ok(StepOutput {
            probs,
            attention: self.attention(k, pos),
            state: state.clone(),
        })
    }
}

/// Running cumulative attention, shared by the wrapping models.
fn accumulate(cum: &[f64], attention: &[f64]) -> Vec<f64> {
    if cum.len() == attention.len() {
        cum.iter().zip(attention).map(|(c, a)| c + a).collect()
    } else {
        attention.to_vec()
    }
}

/// A model whose step distributions are distorted per [`DistortionSpec`].
#[derive(Debug, Clone)]
pub struct DistortedModel<M> {
    inner: M,
    distortion: DistortionSpec,
    features: FeatureConfig,
}

pub fn distort<M: ScoringModel>(
    inner: M,
    distortion: DistortionSpec,
    features: FeatureConfig,
) -> Result<DistortedModel<M>, ModelError> {
    distortion.validate()?;
    Ok(DistortedModel {
        inner,
        distortion,
        features,
    })
}

/// `softmax(ln p / temperature + bias·[y = eos])`; zero stays zero.
pub fn distort_distribution(probs: &[f64], temperature: f64, eos: usize, eos_bias: f64) -> Vec<f64> {
    let z: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(y, &p)| {
            let l = p.ln() / temperature;
            if y == eos && p > 0.0 {
                l + eos_bias
            } else {
                l
            }
        })
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

impl<M: ScoringModel> ScoringModel for DistortedModel<M> {
    type State = (M::State, Vec<f64>);

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn eos_id(&self) -> u32 {
        self.inner.eos_id()
    }

    fn start(&self, source: &[u32]) -> Result<Self::State, ModelError> {
        Ok((self.inner.start(source)?, Vec::new()))
    }

    fn step(&self, state: &Self::State, prefix: &[u32]) -> Result<StepOutput<Self::State>, ModelError> {
        let out = self.inner.step(&state.0, prefix)?;
        let cum = accumulate(&state.1, &out.attention);
        let c = coverage(&cum, self.features.coverage_threshold)?;
        let probs = distort_distribution(
            &out.probs,
            self.distortion.temperature,
            self.inner.eos_id() as usize,
            self.distortion.eos_bias * (1.0 - c),
        );
        Ok(StepOutput {
            probs,
            attention: out.attention,
            state: (out.state, cum),
        })
    }
}

/// A model whose step distributions pass through a fitted calibrator, with
/// attention entropy and coverage computed on the fly.
#[derive(Debug, Clone)]
pub struct RecalibratedModel<M> {
    inner: M,
    calibrator: Calibrator,
    features: FeatureConfig,
}

impl<M: ScoringModel> RecalibratedModel<M> {
    pub fn new(inner: M, calibrator: Calibrator, features: FeatureConfig) -> Self {
        RecalibratedModel {
            inner,
            calibrator,
            features,
        }
    }
}

impl<M: ScoringModel> ScoringModel for RecalibratedModel<M> {
    type State = (M::State, Vec<f64>);

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn eos_id(&self) -> u32 {
        self.inner.eos_id()
    }

    fn start(&self, source: &[u32]) -> Result<Self::State, ModelError> {
        Ok((self.inner.start(source)?, Vec::new()))
    }

    fn step(&self, state: &Self::State, prefix: &[u32]) -> Result<StepOutput<Self::State>, ModelError> {
        let out = self.inner.step(&state.0, prefix)?;
        let cum = accumulate(&state.1, &out.attention);
        let mut record = TokenRecord::from_dense("", prefix.len() as u32 + 1, self.inner.eos_id(), 0, &out.probs);
        record.features = Some(StepFeatures {
            entropy: attention_entropy(&out.attention)?,
            coverage: coverage(&cum, self.features.coverage_threshold)?,
        });
        let probs = self.calibrator.apply_dense(&record, &self.features)?;
        Ok(StepOutput {
            probs,
            attention: out.attention,
            state: (out.state, cum),
        })
    }
}

/// Deterministic per-item random stream.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Teacher-forced logs of `model` on `n` (source, reference) pairs drawn
/// from the true task. Sequence `i` uses random stream `(seed, i)`.
pub fn emit_logs<M: ScoringModel>(
    model: &M,
    task: &TrueModel,
    n: usize,
    seed: u64,
    features: &FeatureConfig,
) -> Result<Vec<SequenceRecord>, ModelError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let (source, reference) = task.sample_pair(&mut rng)?;
            teacher_force(model, &i.to_string(), &source, &reference, features)
        })
        .collect()
}

/// Records `model`'s step distributions conditioned on the reference prefix.
pub fn teacher_force<M: ScoringModel>(
    model: &M,
    seq_id: &str,
    source: &[u32],
    reference: &[u32],
    features: &FeatureConfig,
) -> Result<SequenceRecord, ModelError> {
    let eos = model.eos_id();
    let mut state = model.start(source)?;
    let mut steps = Vec::with_capacity(reference.len());
    for (t, &gold) in reference.iter().enumerate() {
        let out = model.step(&state, &reference[..t])?;
        let mut r = TokenRecord::from_dense(seq_id, t as u32 + 1, eos, gold, &out.probs);
        r.attention = Some(out.attention);
        steps.push(r);
        state = out.state;
    }
    let mut seq = SequenceRecord::new(steps)?;
    if reference.last() == Some(&eos) {
        seq = seq.with_texts(source.to_vec(), reference.to_vec())?;
    } else {
        seq.source = Some(source.to_vec());
        seq.reference = Some(reference.to_vec());
    }
    let enriched = enrich(&seq, features)?;
    for s in &enriched.steps {
        s.validate()?;
    }
    Ok(enriched)
}

/// A source sequence and its target.
pub type Pair = (Vec<u32>, Vec<u32>);

/// Held-out evaluation pairs, pair `i` drawn from stream `(seed, i)`.
pub fn eval_pairs(task: &TrueModel, n: usize, seed: u64) -> Result<Vec<Pair>, ModelError> {
    (0..n)
        .into_par_iter()
        .map(|i| task.sample_pair(&mut item_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSweepRow {
    pub beam: usize,
    /// Corpus BLEU in `[0, 1]`.
    pub corpus_bleu: f64,
    /// Mean log-probability of the top hypothesis.
    pub mean_log_score: f64,
}

/// Decodes held-out pairs with each beam width and scores them against the
/// true references.
pub fn beam_sweep<M: ScoringModel>(
    model: &M,
    task: &TrueModel,
    beams: &[usize],
    n_eval: usize,
    cfg: &BeamConfig,
    seed: u64,
) -> Result<Vec<BeamSweepRow>, ModelError> {
    if beams.is_empty() {
        return Err(config_err("no beam widths given"));
    }
    let pairs = eval_pairs(task, n_eval, seed)?;
    let eos = model.eos_id();
    beams
        .iter()
        .map(|&beam| {
            let bcfg = BeamConfig {
                beam_width: beam,
                ..*cfg
            };
            let decoded: Vec<(Vec<u32>, f64)> = pairs
                .par_iter()
                .map(|(src, _)| {
                    let best = beam_search(model, src, &bcfg)?.into_iter().next();
                    Ok(best.map_or((Vec::new(), f64::NEG_INFINITY), |h| (h.tokens, h.log_prob)))
                })
                .collect::<Result<_, ModelError>>()?;
            let scored: Vec<(&[u32], &[u32])> = decoded
                .iter()
                .zip(&pairs)
                .map(|((h, _), (_, r))| (strip_eos(h, eos), strip_eos(r, eos)))
                .collect();
            let mean_log_score = if decoded.is_empty() {
                0.0
            } else {
                decoded.iter().map(|d| d.1).sum::<f64>() / decoded.len() as f64
            };
            Ok(BeamSweepRow {
                beam,
                corpus_bleu: corpus_bleu(&scored),
                mean_log_score,
            })
        })
        .collect()
}

/// Structured ECE of a model on held-out pairs, with its plot points.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCalibration {
    pub report: CalibrationReport,
    pub points: Vec<SequencePoint>,
}

/// For each held-out source, decodes the top beam hypothesis, estimates its
/// expected BLEU from `samples` model samples and scores it against the true
/// reference; aggregates with Structured ECE.
pub fn sequence_calibration_experiment<M: ScoringModel>(
    model: &M,
    task: &TrueModel,
    n_eval: usize,
    samples: usize,
    bins: BinningConfig,
    cfg: &BeamConfig,
    seed: u64,
) -> Result<SequenceCalibration, ModelError> {
    let eos = model.eos_id();
    let max_len = cfg.max_len;
    let points: Vec<SequencePoint> = (0..n_eval)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let (source, reference) = task.sample_pair(&mut rng)?;
            let best = beam_search(model, &source, cfg)?
                .into_iter()
                .next()
                .map(|h| h.tokens)
                .unwrap_or_default();
            let expected = expected_bleu(model, &source, &best, samples, max_len, &mut rng)?;
            let actual = sentence_bleu(strip_eos(&best, eos), strip_eos(&reference, eos));
            Ok(SequencePoint {
                seq_id: i.to_string(),
                expected_bleu: expected,
                actual_bleu: actual,
            })
        })
        .collect::<Result<_, ModelError>>()?;
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.expected_bleu, p.actual_bleu)).collect();
    let report = structured_ece(&pairs, bins).map_err(ModelError::from)?;
    Ok(SequenceCalibration { report, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::flatten_sequences;

    fn spec(gamma: f64) -> ToyTaskSpec {
        ToyTaskSpec {
            gamma,
            ..Default::default()
        }
    }

    fn entropies(model: &TrueModel, source: &[u32]) -> Vec<f64> {
        let state = model.start(source).unwrap();
        (0..source.len() + 1)
            .map(|t| attention_entropy(&model.step(&state, &vec![0; t]).unwrap().attention).unwrap())
            .collect()
    }

    #[test]
    fn one_hot_alignment_has_zero_entropy() {
        let m = build_true_model(&spec(0.0)).unwrap();
        assert!(entropies(&m, &[3, 1, 4, 1]).iter().all(|&h| h == 0.0));
    }

    #[test]
    fn uniform_attention_has_max_entropy() {
        let m = build_true_model(&spec(1.0)).unwrap();
        let ln5 = 5f64.ln();
        assert!(entropies(&m, &[3, 1, 4, 1, 5]).iter().all(|&h| (h - ln5).abs() < 1e-12));
    }

    #[test]
    fn emission_row_is_the_step_distribution() {
        let s = ToyTaskSpec {
            source_vocab: 1,
            target_vocab: 4,
            smoothing: 0.0,
            emissions: Some(vec![vec![(0, 0.7), (1, 0.3)]]),
            ..Default::default()
        };
        let m = build_true_model(&s).unwrap();
        let state = m.start(&[0, 0]).unwrap();
        assert_eq!(m.step(&state, &[]).unwrap().probs, vec![0.7, 0.3, 0.0, 0.0]);
        assert_eq!(m.step(&state, &[0, 1]).unwrap().probs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn generated_rows_are_distributions() {
        let m = build_true_model(&ToyTaskSpec::default()).unwrap();
        for row in m.rows.iter().chain(std::iter::once(&m.eos_row)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_row = ToyTaskSpec {
            source_vocab: 1,
            emissions: Some(vec![vec![(0, 0.5)]]),
            ..Default::default()
        };
        assert!(build_true_model(&bad_row).is_err());
        let bad_len = ToyTaskSpec {
            min_len: 5,
            max_len: 4,
            ..Default::default()
        };
        assert!(build_true_model(&bad_len).is_err());
        assert!(DistortionSpec {
            temperature: 0.0,
            eos_bias: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn distortion_examples() {
        let p = [0.4, 0.1, 0.5];
        let same = distort_distribution(&p, 1.0, 2, 0.0);
        assert!(same.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12));
        let sq = distort_distribution(&p, 0.5, 2, 0.0);
        let expect = [0.16 / 0.42, 0.01 / 0.42, 0.25 / 0.42];
        assert!(sq.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let biased = distort_distribution(&p, 1.0, 2, 60.0);
        assert!(biased[2] > 1.0 - 1e-12);
        // Zero probabilities stay zero.
        assert_eq!(distort_distribution(&[0.0, 1.0], 0.5, 1, 3.0)[0], 0.0);
    }

    #[test]
    fn identity_distortion_leaves_model_unchanged() {
        let task = build_true_model(&ToyTaskSpec::default()).unwrap();
        let fc = FeatureConfig::default();
        let d = distort(task.clone(), DistortionSpec::default(), fc).unwrap();
        let mut rng = item_rng(3, 0);
        let (src, reference) = task.sample_pair(&mut rng).unwrap();
        let (mut s1, mut s2) = (task.start(&src).unwrap(), d.start(&src).unwrap());
        for t in 0..reference.len() {
            let a = task.step(&s1, &reference[..t]).unwrap();
            let b = d.step(&s2, &reference[..t]).unwrap();
            assert!(a.probs.iter().zip(&b.probs).all(|(x, y)| (x - y).abs() < 1e-12));
            assert_eq!(a.attention, b.attention);
            s1 = a.state;
            s2 = b.state;
        }
    }

    #[test]
    fn eos_bias_fades_with_coverage() {
        let s = ToyTaskSpec {
            gamma: 0.0,
            ..Default::default()
        };
        let task = build_true_model(&s).unwrap();
        let d = distort(
            task.clone(),
            DistortionSpec {
                temperature: 1.0,
                eos_bias: 5.0,
            },
            FeatureConfig::default(),
        )
        .unwrap();
        let src = [0, 1, 2, 3];
        let eos = task.eos_id() as usize;
        let st = d.start(&src).unwrap();
        let first = d.step(&st, &[]).unwrap();
        let truth = task.step(&task.start(&src).unwrap(), &[]).unwrap();
        // Coverage after the first step is 1/4, so EOS gets 5·(3/4) extra logit.
        let ratio = first.probs[eos] / first.probs[0];
        let true_ratio = truth.probs[eos] / truth.probs[0];
        assert!((ratio / true_ratio - (5.0 * 0.75f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn emit_logs_counts_and_determinism() {
        let task = build_true_model(&ToyTaskSpec::default()).unwrap();
        let fc = FeatureConfig::default();
        assert!(emit_logs(&task, &task, 0, 1, &fc).unwrap().is_empty());
        let a = emit_logs(&task, &task, 20, 1, &fc).unwrap();
        let b = emit_logs(&task, &task, 20, 1, &fc).unwrap();
        assert_eq!(a, b);
        for seq in &a {
            let reference = seq.reference.as_ref().unwrap();
            assert_eq!(seq.steps.len(), reference.len());
            assert!(seq.steps.iter().all(|s| s.features.is_some()));
        }
        let records = flatten_sequences(&a);
        assert!(records.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn deterministic_task_has_zero_structured_ece() {
        let s = ToyTaskSpec {
            source_vocab: 3,
            target_vocab: 4,
            min_len: 2,
            max_len: 3,
            smoothing: 0.0,
            emissions: Some(vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)]]),
            ..Default::default()
        };
        let task = build_true_model(&s).unwrap();
        let cfg = BeamConfig {
            beam_width: 2,
            max_len: task.max_output_len(),
            length_normalize: false,
        };
        let out = sequence_calibration_experiment(&task, &task, 30, 5, BinningConfig::default(), &cfg, 0).unwrap();
        assert_eq!(out.report.score, 0.0);
        assert!(out.points.iter().all(|p| p.expected_bleu == p.actual_bleu));
    }

    #[test]
    fn beam_sweep_requires_widths() {
        let task = build_true_model(&ToyTaskSpec::default()).unwrap();
        assert!(beam_sweep(&task, &task, &[], 5, &BeamConfig::default(), 0).is_err());
    }
}
