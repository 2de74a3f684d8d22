//! Calibration measurement and recalibration for autoregressive
//! structured-prediction models.
//!
//! The crate is model-agnostic: it consumes per-step next-token
//! distributions and attention vectors (either from prediction logs or from
//! a [`ScoringModel`]) and never computes them itself.
//!
//! - [`data`]: the prediction-log record types, JSONL format and validation.
//! - [`features`]: attention entropy and input coverage per decoding step.
//! - [`metrics`]: ECE, weighted ECE, NLL, reliability histograms and the
//!   diagnostic partitions (token class, attention entropy, head/tail).
//! - [`recalibrate`]: the coverage-gated EOS correction with variable
//!   temperature, the single-temperature baseline, and NLL fitting.
//! - [`sequence`]: beam search, ancestral sampling, BLEU, expected BLEU and
//!   Structured ECE.
//! - [`toybench`]: a synthetic translation task with exactly known
//!   conditionals and injectable miscalibration.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod accum;
pub mod data;
pub mod error;
pub mod features;
pub mod metrics;
pub mod recalibrate;
pub mod report;
pub mod sequence;
pub mod toybench;

pub use data::{BinningConfig, ReliabilityHistogram, SequenceRecord, StepFeatures, TokenRecord};
pub use error::{DataError, FitError, ModelError};
pub use features::FeatureConfig;
pub use metrics::{CalibrationReport, PartitionSpec};
pub use recalibrate::{Calibrator, CalibratorParams, TrainConfig};
pub use sequence::{BeamConfig, Hypothesis, ScoringModel, StepOutput};
pub use toybench::{DistortionSpec, ToyTaskSpec};
