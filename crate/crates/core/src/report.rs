//! Serializable report shapes shared by the library and the CLI.

use serde::Serialize;

use crate::metrics::{export_reliability, CalibrationReport, ReliabilityRow};

/// `{metric, score, bins}` report for one calibration metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub score: f64,
    pub bins: Vec<ReliabilityRow>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, report: &CalibrationReport) -> Self {
        MetricReport {
            metric: metric.into(),
            score: report.score,
            bins: export_reliability(&report.histogram),
        }
    }
}

/// Column order of the reliability CSV.
pub const RELIABILITY_CSV_HEADER: [&str; 5] = ["bin_lo", "bin_hi", "mass", "avg_confidence", "avg_accuracy"];
