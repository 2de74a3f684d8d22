//! Shared fixtures for the criterion benchmarks.

use seqcal_core::data::{flatten_sequences, TokenRecord};
use seqcal_core::features::FeatureConfig;
use seqcal_core::toybench::{build_true_model, distort, emit_logs, TrueModel};
use seqcal_core::{DistortionSpec, ToyTaskSpec};

/// Default toy task with its true model.
pub fn default_task() -> TrueModel {
    build_true_model(&ToyTaskSpec::default()).expect("default task is valid")
}

/// Teacher-forced records of the default task, sharpened by `temperature`.
pub fn distorted_records(n_sequences: usize, temperature: f64, seed: u64) -> Vec<TokenRecord> {
    let task = default_task();
    let features = FeatureConfig::default();
    let model = distort(
        task.clone(),
        DistortionSpec {
            temperature,
            eos_bias: 0.0,
        },
        features,
    )
    .expect("valid distortion");
    let seqs = emit_logs(&model, &task, n_sequences, seed, &features).expect("toy logs");
    flatten_sequences(&seqs)
}
