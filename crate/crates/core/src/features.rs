//! Per-step inputs of the recalibrator: attention entropy `a_t` and input
//! coverage `c_t`.

use serde::{Deserialize, Serialize};

use crate::data::{SequenceRecord, StepFeatures, NORMALIZATION_TOLERANCE};
use crate::error::DataError;

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// A source position counts as covered once its cumulative attention
    /// exceeds this threshold.
    pub coverage_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
        }
    }
}

impl FeatureConfig {
    pub fn new(coverage_threshold: f64) -> Result<Self, DataError> {
        if !(coverage_threshold > 0.0 && coverage_threshold < 1.0) {
            return Err(DataError::invalid(
                "coverage_threshold",
                format!("{coverage_threshold} is outside (0, 1)"),
            ));
        }
        Ok(FeatureConfig { coverage_threshold })
    }
}

/// Shannon entropy of an attention vector in nats, with `0 ln 0 = 0`.
pub fn attention_entropy(attention: &[f64]) -> Result<f64, DataError> {
    if attention.is_empty() {
        return Err(DataError::invalid("attention", "empty"));
    }
    if attention.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(DataError::invalid("attention", "negative or non-finite entry"));
    }
    let s: f64 = attention.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(DataError::invalid("attention", format!("sums to {s}, expected 1")));
    }
    let h: f64 = attention.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum();
    // Rounding can leave a one-hot at -0.0 or a uniform vector a hair above ln k.
    Ok(h.clamp(0.0, (attention.len() as f64).ln()))
}

/// Fraction of source positions whose cumulative attention exceeds `threshold`.
pub fn coverage(cum_attention: &[f64], threshold: f64) -> Result<f64, DataError> {
    if cum_attention.is_empty() {
        return Err(DataError::invalid("cum_attention", "empty"));
    }
    if cum_attention.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(DataError::invalid("cum_attention", "negative or non-finite entry"));
    }
    let covered = cum_attention.iter().filter(|&&a| a > threshold).count();
    Ok(covered as f64 / cum_attention.len() as f64)
}

/// Fills `features` (and reconstructs missing attention or cumulative
/// attention) for every step of a sequence.
///
/// Steps that already carry features are left untouched. Cumulative
/// attention at step `t` includes step `t` itself. When only cumulative
/// attention is logged, the step's attention is recovered as the difference
/// from the previous step.
pub fn enrich(seq: &SequenceRecord, cfg: &FeatureConfig) -> Result<SequenceRecord, DataError> {
    let mut out = seq.clone();
    let mut running: Option<Vec<f64>> = None;
    for step in out.steps.iter_mut() {
        if step.attention.is_none() {
            if let Some(cum) = &step.cum_attention {
                let att: Vec<f64> = match &running {
                    Some(prev) if prev.len() == cum.len() => {
                        cum.iter().zip(prev).map(|(c, p)| (c - p).max(0.0)).collect()
                    }
                    _ => cum.clone(),
                };
                let s: f64 = att.iter().sum();
                if s > 0.0 && (s - 1.0).abs() <= NORMALIZATION_TOLERANCE {
                    step.attention = Some(att);
                }
            }
        }
        if step.cum_attention.is_none() {
            if let Some(att) = &step.attention {
                let cum = match &running {
                    Some(prev) if prev.len() == att.len() => prev.iter().zip(att).map(|(p, a)| p + a).collect(),
                    _ => att.clone(),
                };
                step.cum_attention = Some(cum);
            }
        }
        running = step.cum_attention.clone();

        if step.features.is_some() {
            continue;
        }
        let (Some(att), Some(cum)) = (&step.attention, &step.cum_attention) else {
            return Err(DataError::MissingFeatures {
                seq_id: step.seq_id.clone(),
                t: step.t,
            });
        };
        step.features = Some(StepFeatures {
            entropy: attention_entropy(att)?,
            coverage: coverage(cum, cfg.coverage_threshold)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenRecord;

    fn step(t: u32, attention: Option<Vec<f64>>) -> TokenRecord {
        let mut r = TokenRecord::from_dense("s", t, 1, 0, &[0.5, 0.5]);
        r.attention = attention;
        r
    }

    #[test]
    fn entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((attention_entropy(&[0.25; 4]).unwrap() - ln4).abs() < 1e-12);
        assert_eq!(attention_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((attention_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(attention_entropy(&[0.5, 0.4]).is_err());
        assert!(attention_entropy(&[]).is_err());
        assert!(attention_entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn coverage_examples() {
        assert!((coverage(&[0.9, 0.4, 0.1], 0.35).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&[0.0, 0.0], 0.35).unwrap(), 0.0);
        assert_eq!(coverage(&[0.5, 0.9, 2.0], 0.35).unwrap(), 1.0);
        assert!(coverage(&[], 0.35).is_err());
    }

    #[test]
    fn threshold_bounds() {
        assert!(FeatureConfig::new(0.0).is_err());
        assert!(FeatureConfig::new(1.0).is_err());
        assert!(FeatureConfig::new(0.35).is_ok());
    }

    #[test]
    fn enrich_cumulates_attention() {
        let seq = SequenceRecord::new(vec![step(1, Some(vec![1.0, 0.0])), step(2, Some(vec![0.0, 1.0]))]).unwrap();
        let out = enrich(&seq, &FeatureConfig::default()).unwrap();
        let cov: Vec<f64> = out.steps.iter().map(|s| s.features.unwrap().coverage).collect();
        assert_eq!(cov, vec![0.5, 1.0]);
        assert_eq!(out.steps[1].cum_attention.as_deref(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn enrich_keeps_precomputed_features() {
        let mut s = step(1, None);
        s.features = Some(StepFeatures {
            entropy: 0.3,
            coverage: 0.25,
        });
        let seq = SequenceRecord::new(vec![s]).unwrap();
        let out = enrich(&seq, &FeatureConfig::default()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn enrich_uniform_attention() {
        let steps = (1..=3).map(|t| step(t, Some(vec![0.25; 4]))).collect();
        let out = enrich(&SequenceRecord::new(steps).unwrap(), &FeatureConfig::default()).unwrap();
        for s in &out.steps {
            assert!((s.features.unwrap().entropy - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn enrich_recovers_attention_from_cumulative() {
        let mut a = step(1, None);
        a.cum_attention = Some(vec![0.8, 0.2]);
        let mut b = step(2, None);
        b.cum_attention = Some(vec![1.0, 1.0]);
        let out = enrich(&SequenceRecord::new(vec![a, b]).unwrap(), &FeatureConfig::default()).unwrap();
        let att = out.steps[1].attention.as_ref().unwrap();
        assert!((att[0] - 0.2).abs() < 1e-12 && (att[1] - 0.8).abs() < 1e-12);
        assert_eq!(out.steps[0].features.unwrap().coverage, 0.5);
    }

    #[test]
    fn enrich_missing_sources_names_step() {
        let seq = SequenceRecord::new(vec![step(1, Some(vec![1.0])), step(2, None)]).unwrap();
        // Step 2 inherits nothing: it has no attention of its own.
        match enrich(&seq, &FeatureConfig::default()) {
            Err(DataError::MissingFeatures { seq_id, t }) => {
                assert_eq!(seq_id, "s");
                assert_eq!(t, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enrich_is_idempotent() {
        let seq = SequenceRecord::new(vec![
            step(1, Some(vec![0.6, 0.3, 0.1])),
            step(2, Some(vec![0.1, 0.6, 0.3])),
            step(3, Some(vec![0.0, 0.2, 0.8])),
        ])
        .unwrap();
        let cfg = FeatureConfig::default();
        let once = enrich(&seq, &cfg).unwrap();
        assert_eq!(enrich(&once, &cfg).unwrap(), once);
    }
}
