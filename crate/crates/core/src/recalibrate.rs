//! Post-hoc recalibration of next-token distributions.
//!
//! Two calibrators are provided:
//!
//! - a single global temperature, `q ∝ p^(1/T)`, fitted by 1-D search;
//! - a variable temperature conditioned on the decoding context. The EOS
//!   logit is first corrected by the input coverage `c_t`,
//!   `l'_eos = l_eos + ln σ(w1·(c_t − w2))`, then every token logit is scaled
//!   by `T⁻¹ = g(a_t)·h(l')` where `a_t` is the attention entropy and `g`,
//!   `h` are 1→3→3→1 ReLU nets with a sigmoid output (optionally shifted by
//!   one). Parameters are fitted by full-batch gradient descent on the
//!   validation NLL with hand-written backpropagation.
//!
//! Logits are natural-log probabilities. Zero-probability tokens have logit
//! −∞ and stay at probability zero under every calibrator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CompactDist, StepFeatures, TokenRecord};
use crate::error::{DataError, FitError};
use crate::features::{attention_entropy, coverage, FeatureConfig};

pub const PARAMS_VERSION: &str = "seqcal-params-v1";

/// Search interval for the single temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

const HIDDEN: usize = 3;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Feed-forward net 1 → 3 (ReLU) → 3 (ReLU) → 1 (sigmoid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetJson", into = "NetJson")]
pub struct TinyNet {
    pub w1: [f64; HIDDEN],
    pub b1: [f64; HIDDEN],
    pub w2: [[f64; HIDDEN]; HIDDEN],
    pub b2: [f64; HIDDEN],
    pub w3: [f64; HIDDEN],
    pub b3: f64,
}

/// Number of scalar parameters in a [`TinyNet`].
pub const NET_PARAMS: usize = 3 * HIDDEN + HIDDEN * HIDDEN + HIDDEN + 1;

/// File form: weights as `[layer][row][col]`, biases as `[layer][row]`.
#[derive(Serialize, Deserialize)]
struct NetJson {
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<TinyNet> for NetJson {
    fn from(n: TinyNet) -> Self {
        NetJson {
            weights: vec![
                n.w1.iter().map(|&w| vec![w]).collect(),
                n.w2.iter().map(|r| r.to_vec()).collect(),
                vec![n.w3.to_vec()],
            ],
            biases: vec![n.b1.to_vec(), n.b2.to_vec(), vec![n.b3]],
        }
    }
}

impl TryFrom<NetJson> for TinyNet {
    type Error = String;

    fn try_from(j: NetJson) -> Result<Self, String> {
        let shape_err = || "net must have weights [3x1, 3x3, 1x3] and biases [3, 3, 1]".to_string();
        if j.weights.len() != 3 || j.biases.len() != 3 {
            return Err(shape_err());
        }
        let row = |v: &[f64], n: usize| -> Result<Vec<f64>, String> {
            if v.len() == n && v.iter().all(|x| x.is_finite()) {
                Ok(v.to_vec())
            } else {
                Err(shape_err())
            }
        };
        let mut net = TinyNet::zeroed();
        if j.weights[0].len() != HIDDEN || j.weights[1].len() != HIDDEN || j.weights[2].len() != 1 {
            return Err(shape_err());
        }
        for i in 0..HIDDEN {
            net.w1[i] = row(&j.weights[0][i], 1)?[0];
            net.w2[i].copy_from_slice(&row(&j.weights[1][i], HIDDEN)?);
        }
        net.w3.copy_from_slice(&row(&j.weights[2][0], HIDDEN)?);
        net.b1.copy_from_slice(&row(&j.biases[0], HIDDEN)?);
        net.b2.copy_from_slice(&row(&j.biases[1], HIDDEN)?);
        net.b3 = row(&j.biases[2], 1)?[0];
        Ok(net)
    }
}

/// Activations kept for the backward pass.
struct NetTrace {
    x: f64,
    z1: [f64; HIDDEN],
    a1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    a2: [f64; HIDDEN],
    s: f64,
}

impl TinyNet {
    pub fn zeroed() -> Self {
        TinyNet {
            w1: [0.0; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [[0.0; HIDDEN]; HIDDEN],
            b2: [0.0; HIDDEN],
            w3: [0.0; HIDDEN],
            b3: 0.0,
        }
    }

    fn random(rng: &mut impl Rng, scale: f64) -> Self {
        let mut v = [0.0; NET_PARAMS];
        for x in v.iter_mut() {
            *x = if scale > 0.0 {
                rng.gen_range(-scale..=scale)
            } else {
                0.0
            };
        }
        TinyNet::from_slice(&v)
    }

    fn forward(&self, x: f64) -> NetTrace {
        let mut z1 = [0.0; HIDDEN];
        let mut a1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            z1[i] = self.w1[i] * x + self.b1[i];
            a1[i] = z1[i].max(0.0);
        }
        let mut z2 = [0.0; HIDDEN];
        let mut a2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            z2[i] = self.b2[i] + (0..HIDDEN).map(|j| self.w2[i][j] * a1[j]).sum::<f64>();
            a2[i] = z2[i].max(0.0);
        }
        let o = self.b3 + (0..HIDDEN).map(|i| self.w3[i] * a2[i]).sum::<f64>();
        NetTrace {
            x,
            z1,
            a1,
            z2,
            a2,
            s: sigmoid(o),
        }
    }

    /// Sigmoid output for input `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.forward(x).s
    }

    /// Accumulates `upstream · ∂s/∂θ` into `grad` (laid out as
    /// [`TinyNet::to_vec`]) and returns `upstream · ∂s/∂x`.
    fn backward(&self, t: &NetTrace, upstream: f64, grad: &mut [f64]) -> f64 {
        let go = upstream * t.s * (1.0 - t.s);
        let (gw1, rest) = grad.split_at_mut(HIDDEN);
        let (gb1, rest) = rest.split_at_mut(HIDDEN);
        let (gw2, rest) = rest.split_at_mut(HIDDEN * HIDDEN);
        let (gb2, rest) = rest.split_at_mut(HIDDEN);
        let (gw3, gb3) = rest.split_at_mut(HIDDEN);
        gb3[0] += go;
        let mut gz2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            gw3[i] += go * t.a2[i];
            gz2[i] = if t.z2[i] > 0.0 { go * self.w3[i] } else { 0.0 };
        }
        let mut ga1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            gb2[i] += gz2[i];
            for j in 0..HIDDEN {
                gw2[i * HIDDEN + j] += gz2[i] * t.a1[j];
                ga1[j] += gz2[i] * self.w2[i][j];
            }
        }
        let mut gx = 0.0;
        for i in 0..HIDDEN {
            let gz1 = if t.z1[i] > 0.0 { ga1[i] } else { 0.0 };
            gw1[i] += gz1 * t.x;
            gb1[i] += gz1;
            gx += gz1 * self.w1[i];
        }
        gx
    }

    /// Flattened parameters: `w1, b1, w2 (row-major), b2, w3, b3`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NET_PARAMS);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        self.w2.iter().for_each(|r| v.extend_from_slice(r));
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), NET_PARAMS);
        let mut n = TinyNet::zeroed();
        n.w1.copy_from_slice(&v[0..3]);
        n.b1.copy_from_slice(&v[3..6]);
        for i in 0..HIDDEN {
            n.w2[i].copy_from_slice(&v[6 + 3 * i..9 + 3 * i]);
        }
        n.b2.copy_from_slice(&v[15..18]);
        n.w3.copy_from_slice(&v[18..21]);
        n.b3 = v[21];
        n
    }
}

/// Parameters of the coverage/attention/logit-conditioned calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorParams {
    pub w1: f64,
    pub w2: f64,
    /// Use `1 + σ(·)` for both factors, so `T⁻¹ ∈ (1, 4)` instead of `(0, 1)`.
    pub plus_one: bool,
    pub g_net: TinyNet,
    pub h_net: TinyNet,
}

/// Total number of scalar parameters in [`CalibratorParams`].
pub const NUM_PARAMS: usize = 2 + 2 * NET_PARAMS;

impl CalibratorParams {
    /// Both nets zeroed, so `T⁻¹ = 0.25` (or `2.25` with `plus_one`).
    pub fn zeroed(plus_one: bool) -> Self {
        CalibratorParams {
            w1: 1.0,
            w2: DEFAULT_W2,
            plus_one,
            g_net: TinyNet::zeroed(),
            h_net: TinyNet::zeroed(),
        }
    }

    /// Starting point of [`fit`]: net weights uniform in `±init_scale`,
    /// `w1 = 1`, `w2 = 0.35`.
    pub fn initial(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        CalibratorParams {
            w1: 1.0,
            w2: DEFAULT_W2,
            plus_one: cfg.plus_one,
            g_net: TinyNet::random(&mut rng, cfg.init_scale),
            h_net: TinyNet::random(&mut rng, cfg.init_scale),
        }
    }

    /// Flattened parameters: `w1, w2, g_net.., h_net..`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.w1, self.w2];
        v.extend(self.g_net.to_vec());
        v.extend(self.h_net.to_vec());
        v
    }

    pub fn from_vec(v: &[f64], plus_one: bool) -> Self {
        assert_eq!(v.len(), NUM_PARAMS);
        CalibratorParams {
            w1: v[0],
            w2: v[1],
            plus_one,
            g_net: TinyNet::from_slice(&v[2..2 + NET_PARAMS]),
            h_net: TinyNet::from_slice(&v[2 + NET_PARAMS..]),
        }
    }

    fn factor(&self, s: f64) -> f64 {
        if self.plus_one {
            1.0 + s
        } else {
            s
        }
    }

    /// EOS logit shift `ln σ(w1·(c − w2))`; always negative.
    pub fn eos_shift(&self, coverage: f64) -> f64 {
        log_sigmoid(self.w1 * (coverage - self.w2))
    }
}

const DEFAULT_W2: f64 = 0.35;

/// Adds the coverage-gated EOS shift to the EOS logit; other logits are
/// returned unchanged.
pub fn eos_correction(logits: &[f64], coverage: f64, eos_id: u32, params: &CalibratorParams) -> Vec<f64> {
    let mut out = logits.to_vec();
    if let Some(l) = out.get_mut(eos_id as usize) {
        *l += params.eos_shift(coverage);
    }
    out
}

/// `T⁻¹ = g(entropy)·h(corrected_logit)`.
pub fn inverse_temperature(entropy: f64, corrected_logit: f64, params: &CalibratorParams) -> f64 {
    params.factor(params.g_net.eval(entropy)) * params.factor(params.h_net.eval(corrected_logit))
}

/// A fitted calibrator, as stored in a params file.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Calibrator {
    Single { temperature: f64 },
    Variable(CalibratorParams),
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    version: String,
    #[serde(flatten)]
    calibrator: Calibrator,
}

impl Calibrator {
    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            version: PARAMS_VERSION.to_string(),
            calibrator: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("params serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        let file: ParamsFile = serde_json::from_str(s).map_err(|e| DataError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.version != PARAMS_VERSION {
            return Err(DataError::invalid(
                "version",
                format!("expected `{PARAMS_VERSION}`, found `{}`", file.version),
            ));
        }
        match &file.calibrator {
            Calibrator::Single { temperature } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(DataError::invalid("temperature", "must be positive and finite"))
            }
            Calibrator::Variable(p) if p.to_vec().iter().any(|x| !x.is_finite()) => {
                Err(DataError::invalid("params", "non-finite weight"))
            }
            _ => Ok(file.calibrator),
        }
    }

    /// Recalibrates a compact distribution given the step's features.
    /// Returns the new probability of each slot (per token, not per slot).
    fn transform(&self, dist: &CompactDist, features: Option<StepFeatures>) -> Result<Vec<f64>, DataError> {
        let logits: Vec<f64> = dist.slots.iter().map(|s| s.prob.ln()).collect();
        let scaled: Vec<f64> = match self {
            Calibrator::Single { temperature } => logits.iter().map(|l| l / temperature).collect(),
            Calibrator::Variable(p) => {
                let f = features.ok_or_else(|| DataError::MissingFeatures {
                    seq_id: String::new(),
                    t: 0,
                })?;
                let g = p.factor(p.g_net.eval(f.entropy));
                let shift = p.eos_shift(f.coverage);
                logits
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if l == f64::NEG_INFINITY {
                            return l;
                        }
                        let lc = if i == dist.eos { l + shift } else { l };
                        lc * g * p.factor(p.h_net.eval(lc))
                    })
                    .collect()
            }
        };
        Ok(softmax_counts(&scaled, dist))
    }

    /// Recalibrated distribution over the full vocabulary.
    pub fn apply_dense(&self, record: &TokenRecord, cfg: &FeatureConfig) -> Result<Vec<f64>, DataError> {
        let dist = CompactDist::from_record(record)?;
        let features = self.features_for(record, cfg)?;
        let q = self.transform(&dist, features)?;
        let mut dense = vec![0.0; record.vocab_size];
        let pool = dist.slots.iter().position(|s| s.token.is_none());
        if let Some(pi) = pool {
            dense.iter_mut().for_each(|x| *x = q[pi]);
        }
        for (s, &qs) in dist.slots.iter().zip(&q) {
            if let Some(id) = s.token {
                dense[id as usize] = qs;
            }
        }
        Ok(dense)
    }

    /// Recalibrated copy of a record in the log format. Every named token is
    /// listed explicitly; the pooled tokens keep sharing `rest_mass`.
    pub fn apply_record(&self, record: &TokenRecord, cfg: &FeatureConfig) -> Result<TokenRecord, DataError> {
        let dist = CompactDist::from_record(record)?;
        let features = self.features_for(record, cfg)?;
        let q = self.transform(&dist, features)?;
        let mut out = record.clone();
        out.entries = dist
            .slots
            .iter()
            .zip(&q)
            .filter_map(|(s, &qs)| s.token.map(|id| (id, qs)))
            .collect();
        out.rest_mass = dist
            .slots
            .iter()
            .zip(&q)
            .filter(|(s, _)| s.token.is_none())
            .map(|(s, &qs)| s.count as f64 * qs)
            .sum();
        if out.features.is_none() {
            out.features = features;
        }
        Ok(out)
    }

    fn features_for(&self, record: &TokenRecord, cfg: &FeatureConfig) -> Result<Option<StepFeatures>, DataError> {
        if matches!(self, Calibrator::Single { .. }) {
            return Ok(record.features);
        }
        step_features(record, cfg).map(Some)
    }
}

/// Features of a record: the logged ones, or computed from its attention
/// and cumulative attention.
pub fn step_features(record: &TokenRecord, cfg: &FeatureConfig) -> Result<StepFeatures, DataError> {
    if let Some(f) = record.features {
        return Ok(f);
    }
    match (&record.attention, &record.cum_attention) {
        (Some(a), Some(c)) => Ok(StepFeatures {
            entropy: attention_entropy(a)?,
            coverage: coverage(c, cfg.coverage_threshold)?,
        }),
        _ => Err(DataError::MissingFeatures {
            seq_id: record.seq_id.clone(),
            t: record.t,
        }),
    }
}

/// Softmax over slots where slot `i` stands for `count_i` tokens with logit
/// `z_i`. Returns per-token probabilities.
fn softmax_counts(z: &[f64], dist: &CompactDist) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = e.iter().zip(&dist.slots).map(|(e, s)| e * s.count as f64).sum();
    e.iter().map(|x| x / total).collect()
}

/// Recalibrated dense distribution of one record under the variable
/// calibrator.
pub fn apply(record: &TokenRecord, params: &CalibratorParams, cfg: &FeatureConfig) -> Result<Vec<f64>, DataError> {
    Calibrator::Variable(params.clone()).apply_dense(record, cfg)
}

/// `∝ P(y)^(1/T)`, renormalized. Zero probabilities stay zero.
pub fn apply_single_temperature(probs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// A validation record reduced to what the loss needs.
#[derive(Debug, Clone)]
struct Prepared {
    entropy: f64,
    coverage: f64,
    /// Log-probabilities of the positive-probability slots.
    logits: Vec<f64>,
    counts: Vec<f64>,
    eos: Option<usize>,
    gold: usize,
}

/// Validation set in the form used by the loss and its gradient.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    items: Vec<Prepared>,
    ids: Vec<String>,
}

impl ValidationSet {
    /// Requires features on every record (use [`crate::features::enrich`]
    /// first) and a positive gold probability.
    pub fn new(records: &[TokenRecord]) -> Result<Self, FitError> {
        if records.is_empty() {
            return Err(FitError::EmptyDataset);
        }
        let mut items = Vec::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        for r in records {
            let f = r.features.ok_or_else(|| DataError::MissingFeatures {
                seq_id: r.seq_id.clone(),
                t: r.t,
            })?;
            items.push(prepare(r, f)?);
            ids.push(format!("{}:{}", r.seq_id, r.t));
        }
        Ok(ValidationSet { items, ids })
    }

    /// Like [`ValidationSet::new`] but without requiring features. Only the
    /// single-temperature loss is meaningful on the result.
    pub fn without_features(records: &[TokenRecord]) -> Result<Self, FitError> {
        let placeholder = StepFeatures {
            entropy: 0.0,
            coverage: 1.0,
        };
        let filled: Vec<TokenRecord> = records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.features.get_or_insert(placeholder);
                r
            })
            .collect();
        Self::new(&filled)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn prepare(r: &TokenRecord, f: StepFeatures) -> Result<Prepared, DataError> {
    let dist = CompactDist::from_record(r)?;
    if !(dist.slots[dist.gold].prob > 0.0) {
        return Err(DataError::ZeroGoldProbability {
            seq_id: r.seq_id.clone(),
            t: r.t,
        });
    }
    let mut logits = Vec::with_capacity(dist.slots.len());
    let mut counts = Vec::with_capacity(dist.slots.len());
    let (mut gold, mut eos) = (None, None);
    for (i, s) in dist.slots.iter().enumerate() {
        if !(s.prob > 0.0 && s.count > 0) {
            continue;
        }
        let l = s.prob.ln();
        let special = i == dist.gold || i == dist.eos;
        // Tokens with equal logits contribute identical terms, so ordinary
        // ones are pooled. Smoothed distributions collapse to a few slots.
        if !special {
            let shared = (0..logits.len()).find(|&j| logits[j] == l && Some(j) != gold && Some(j) != eos);
            if let Some(j) = shared {
                counts[j] += s.count as f64;
                continue;
            }
        }
        if i == dist.gold {
            gold = Some(logits.len());
        }
        if i == dist.eos {
            eos = Some(logits.len());
        }
        logits.push(l);
        counts.push(s.count as f64);
    }
    Ok(Prepared {
        entropy: f.entropy,
        coverage: f.coverage,
        logits,
        counts,
        eos,
        gold: gold.expect("gold slot has positive probability"),
    })
}

/// Loss of one record; adds its gradient into `grad` when given.
fn record_loss(p: &CalibratorParams, r: &Prepared, grad: Option<&mut [f64]>) -> f64 {
    let n = r.logits.len();
    let u = p.w1 * (r.coverage - p.w2);
    let shift = log_sigmoid(u);
    let g_trace = p.g_net.forward(r.entropy);
    let g = p.factor(g_trace.s);

    let mut lc = r.logits.clone();
    if let Some(e) = r.eos {
        lc[e] += shift;
    }
    let h_traces: Vec<NetTrace> = lc.iter().map(|&l| p.h_net.forward(l)).collect();
    let z: Vec<f64> = lc.iter().zip(&h_traces).map(|(&l, t)| l * g * p.factor(t.s)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = z.iter().zip(&r.counts).map(|(&zi, &c)| c * (zi - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let loss = -(z[r.gold] - max) + total.ln();

    let Some(grad) = grad else {
        return loss;
    };
    let (g_head, rest) = grad.split_at_mut(2);
    let (g_g, g_h) = rest.split_at_mut(NET_PARAMS);
    let mut d_g = 0.0;
    for i in 0..n {
        let dz = weights[i] / total - if i == r.gold { 1.0 } else { 0.0 };
        if dz == 0.0 {
            continue;
        }
        let h = p.factor(h_traces[i].s);
        d_g += dz * lc[i] * h;
        // dz/dh = l'·g; backward also returns dh/dl'.
        let dh_dl = p.h_net.backward(&h_traces[i], dz * lc[i] * g, g_h);
        if Some(i) == r.eos {
            // z = l'·g·h(l'), so dz/dl' = g·h + l'·g·h'(l'); the second term
            // was returned by the h-net backward pass.
            let d_lc = dz * g * h + dh_dl;
            let d_u = d_lc * sigmoid(-u);
            g_head[0] += d_u * (r.coverage - p.w2);
            g_head[1] += d_u * -p.w1;
        }
    }
    p.g_net.backward(&g_trace, d_g, g_g);
    loss
}

const CHUNK: usize = 512;

/// Mean NLL and its gradient (laid out as [`CalibratorParams::to_vec`]).
///
/// Records are reduced in fixed-size chunks whose partial sums are combined
/// in chunk order, so the result does not depend on the thread count.
pub fn loss_and_gradient(params: &CalibratorParams, data: &ValidationSet) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = data
        .items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; NUM_PARAMS];
            let loss = chunk
                .iter()
                .map(|r| record_loss(params, r, Some(&mut grad)))
                .sum::<f64>();
            (loss, grad)
        })
        .collect();
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; NUM_PARAMS];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|x| *x /= n);
    (loss / n, grad)
}

/// Gradient of the mean validation NLL with respect to every parameter.
pub fn gradient(params: &CalibratorParams, data: &ValidationSet) -> Vec<f64> {
    loss_and_gradient(params, data).1
}

/// Mean validation NLL under the variable calibrator.
pub fn validation_nll(params: &CalibratorParams, data: &ValidationSet) -> f64 {
    let partials: Vec<f64> = data
        .items
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|r| record_loss(params, r, None)).sum())
        .collect();
    partials.iter().sum::<f64>() / data.len() as f64
}

/// Mean NLL of the records as logged (no recalibration).
pub fn uncalibrated_nll(data: &ValidationSet) -> f64 {
    data.items.iter().map(|r| -r.logits[r.gold]).sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain full-batch gradient descent with a fixed step size.
    GradientDescent,
    /// Adam with a fixed base step size.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the best validation NLL has improved by less than this over
    /// the last `patience` epochs.
    pub tolerance: f64,
    pub patience: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub plus_one: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            max_epochs: 3000,
            tolerance: 1e-7,
            patience: 100,
            seed: 0,
            init_scale: 0.1,
            plus_one: false,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || !(self.tolerance > 0.0) || self.patience == 0 {
            return Err(FitError::Config(
                "learning rate, epochs, tolerance and patience must be positive".into(),
            ));
        }
        if !(self.init_scale >= 0.0) {
            return Err(FitError::Config("init scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Best parameters seen.
    pub params: CalibratorParams,
    /// Validation NLL of the initial parameters.
    pub initial_nll: f64,
    /// Validation NLL of `params`; never above `initial_nll`.
    pub best_nll: f64,
    /// Validation NLL of the logged distributions, for reference.
    pub uncalibrated_nll: f64,
    pub epochs: usize,
}

/// Fits the variable-temperature calibrator by full-batch descent on the
/// mean validation NLL, keeping the best parameters seen.
pub fn fit(data: &ValidationSet, cfg: &TrainConfig) -> Result<FitOutcome, FitError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let plus_one = cfg.plus_one;
    let mut theta = CalibratorParams::initial(cfg).to_vec();
    let mut best = theta.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial_nll = f64::NAN;
    let mut history: Vec<f64> = Vec::new();
    let (mut m, mut v) = (vec![0.0; NUM_PARAMS], vec![0.0; NUM_PARAMS]);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        let params = CalibratorParams::from_vec(&theta, plus_one);
        let (loss, grad) = loss_and_gradient(&params, data);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let record = data
                .items
                .iter()
                .position(|r| !record_loss(&params, r, None).is_finite())
                .map_or_else(|| "<gradient>".to_string(), |i| data.ids[i].clone());
            return Err(FitError::NonFinite {
                iteration: epoch,
                record,
            });
        }
        if epoch == 0 {
            initial_nll = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best.clone_from(&theta);
        }
        history.push(best_loss);
        epochs = epoch + 1;
        if history.len() > cfg.patience {
            let past = history[history.len() - 1 - cfg.patience];
            if past - best_loss < cfg.tolerance {
                break;
            }
        }
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                theta
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(t, g)| *t -= cfg.learning_rate * g);
            }
            Optimizer::Adam => {
                let k = (epoch + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                for i in 0..NUM_PARAMS {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(FitOutcome {
        params: CalibratorParams::from_vec(&best, plus_one),
        initial_nll,
        best_nll: best_loss,
        uncalibrated_nll: uncalibrated_nll(data),
        epochs,
    })
}

/// Mean NLL of `softmax(l / T)` over the set.
pub fn single_temperature_nll(data: &ValidationSet, temperature: f64) -> f64 {
    let inv = 1.0 / temperature;
    let partials: Vec<f64> = data
        .items
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|r| {
                    let max = r.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) * inv;
                    let total: f64 = r
                        .logits
                        .iter()
                        .zip(&r.counts)
                        .map(|(l, c)| c * (l * inv - max).exp())
                        .sum();
                    -(r.logits[r.gold] * inv - max) + total.ln()
                })
                .sum()
        })
        .collect();
    partials.iter().sum::<f64>() / data.len() as f64
}

/// First and second derivative of the mean NLL with respect to `s = 1/T`.
/// The NLL is convex in `s`.
fn inverse_temperature_derivatives(data: &ValidationSet, s: f64) -> (f64, f64) {
    let (d1, d2) = data.items.iter().fold((0.0, 0.0), |(d1, d2), r| {
        let max = r.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) * s;
        let w: Vec<f64> = r
            .logits
            .iter()
            .zip(&r.counts)
            .map(|(l, c)| c * (l * s - max).exp())
            .collect();
        let total: f64 = w.iter().sum();
        let mean: f64 = w.iter().zip(&r.logits).map(|(w, l)| w * l).sum::<f64>() / total;
        let var: f64 = w
            .iter()
            .zip(&r.logits)
            .map(|(w, l)| w * (l - mean).powi(2))
            .sum::<f64>()
            / total;
        (d1 + mean - r.logits[r.gold], d2 + var)
    });
    let n = data.len() as f64;
    (d1 / n, d2 / n)
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`. Ties move
/// the bracket left, so a flat objective returns `lo`.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        a
    } else {
        b
    }
}

/// Temperature minimizing the validation NLL of `softmax(l / T)`:
/// golden-section search over [`TEMPERATURE_RANGE`], then Newton steps on
/// `1/T` while they keep improving.
pub fn fit_single_temperature(data: &ValidationSet) -> Result<f64, FitError> {
    if data.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let (lo, hi) = TEMPERATURE_RANGE;
    let mut t = golden_section(|t| single_temperature_nll(data, t), lo, hi, 1e-6);
    let mut best = single_temperature_nll(data, t);
    if !best.is_finite() {
        return Err(FitError::NonFinite {
            iteration: 0,
            record: "<temperature search>".into(),
        });
    }
    for _ in 0..20 {
        let s = 1.0 / t;
        let (d1, d2) = inverse_temperature_derivatives(data, s);
        if !(d2 > 0.0) || d1 == 0.0 {
            break;
        }
        let candidate = 1.0 / (s - d1 / d2);
        if !(lo..=hi).contains(&candidate) {
            break;
        }
        let loss = single_temperature_nll(data, candidate);
        if loss < best {
            let done = (candidate - t).abs() < 1e-12 * t;
            best = loss;
            t = candidate;
            if done {
                break;
            }
        } else {
            break;
        }
    }
    Ok(t)
}
