use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use seqcal_core::data::{flatten_sequences, group_sequences, read_log, write_log};
use seqcal_core::features::enrich;
use seqcal_core::metrics::{ece, head_tail_curve, partitioned_metric, weighted_ece, ReliabilityRow};
use seqcal_core::recalibrate::{fit, fit_single_temperature, single_temperature_nll, uncalibrated_nll, ValidationSet};
use seqcal_core::report::{MetricReport, RELIABILITY_CSV_HEADER};
use seqcal_core::toybench::{
    beam_sweep, build_true_model, distort, emit_logs, sequence_calibration_experiment, RecalibratedModel, TrueModel,
};
use seqcal_core::{
    BeamConfig, BinningConfig, Calibrator, DistortionSpec, FeatureConfig, TokenRecord, ToyTaskSpec, TrainConfig,
};

use crate::args::{ApplyArgs, BeamsweepArgs, FitArgs, GenArgs, Mode, Partition, SeqcalArgs, StatsArgs};

/// Shared settings from the global flags.
pub struct RunContext {
    pub seed: u64,
    pub out: PathBuf,
}

impl RunContext {
    fn report_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn read_records(path: &Path) -> Result<Vec<TokenRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_log(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn write_records(path: &Path, records: &[TokenRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_log(BufWriter::new(file), records).with_context(|| format!("writing {}", path.display()))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_reliability_csv(path: &Path, rows: &[ReliabilityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(RELIABILITY_CSV_HEADER)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.bin_lo.to_string(),
            r.bin_hi.to_string(),
            r.mass.to_string(),
            opt(r.avg_confidence),
            opt(r.avg_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<name>.json` and `<name>_reliability.csv`; returns the JSON path.
fn write_metric(ctx: &RunContext, name: &str, report: &MetricReport) -> Result<PathBuf> {
    let json_path = ctx.report_path(&format!("{name}.json"))?;
    write_json(&json_path, report)?;
    write_reliability_csv(&ctx.report_path(&format!("{name}_reliability.csv"))?, &report.bins)?;
    Ok(json_path)
}

/// Fills missing features from attention, one sequence at a time. Records
/// that already carry features are left as they are.
fn with_features(records: Vec<TokenRecord>, delta: f64) -> Result<Vec<TokenRecord>> {
    if records.iter().all(|r| r.features.is_some()) {
        return Ok(records);
    }
    let cfg = FeatureConfig::new(delta)?;
    let seqs = group_sequences(records)?;
    let enriched = seqs.iter().map(|s| enrich(s, &cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(flatten_sequences(&enriched))
}

pub fn stats(ctx: &RunContext, args: &StatsArgs) -> Result<String> {
    let mut records = read_records(&args.logs)?;
    let bins = BinningConfig::new(args.bins as usize)?;
    let (name, report) = if args.weighted {
        ("weighted_ece", weighted_ece(&records, bins)?)
    } else {
        ("ece", ece(&records, bins)?)
    };
    let report = MetricReport::new(name, &report);
    let path = write_metric(ctx, name, &report)?;
    let mut summary = format!(
        "{name}={:.6} records={} bins={} report={}",
        report.score,
        records.len(),
        args.bins,
        path.display()
    );
    match &args.partition {
        None => {}
        Some(Partition::Groups(spec)) => {
            if matches!(spec, seqcal_core::PartitionSpec::EntropySplit { .. }) {
                records = with_features(records, args.delta)?;
            }
            let groups = partitioned_metric(&records, spec, bins)?;
            let path = ctx.report_path("partition.json")?;
            write_json(
                &path,
                &json!({ "partition": spec, "bins": args.bins, "groups": groups }),
            )?;
            summary.push_str(&format!(" partition={}", path.display()));
        }
        Some(Partition::HeadTail(thresholds)) => {
            let rows = head_tail_curve(&records, thresholds)?;
            let path = ctx.report_path("head_tail.json")?;
            write_json(&path, &rows)?;
            let mut w = csv::Writer::from_path(ctx.report_path("head_tail.csv")?)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            summary.push_str(&format!(" head_tail={}", path.display()));
        }
    }
    Ok(summary)
}

pub fn fit_cmd(ctx: &RunContext, args: &FitArgs) -> Result<String> {
    let records = read_records(&args.logs)?;
    let (calibrator, details) = match args.mode {
        Mode::Single => {
            let data = ValidationSet::without_features(&records)?;
            let t = fit_single_temperature(&data)?;
            let nll = single_temperature_nll(&data, t);
            let before = uncalibrated_nll(&data);
            (
                Calibrator::Single { temperature: t },
                json!({ "mode": "single", "records": data.len(), "temperature": t,
                        "uncalibrated_nll": before, "nll": nll }),
            )
        }
        Mode::Variable => {
            let records = with_features(records, args.delta)?;
            let data = ValidationSet::new(&records)?;
            let cfg = TrainConfig {
                seed: ctx.seed,
                plus_one: args.plus_one,
                max_epochs: args.max_epochs as usize,
                ..Default::default()
            };
            let out = fit(&data, &cfg)?;
            (
                Calibrator::Variable(out.params),
                json!({ "mode": "variable", "records": data.len(), "plus_one": args.plus_one,
                        "epochs": out.epochs, "uncalibrated_nll": out.uncalibrated_nll,
                        "initial_nll": out.initial_nll, "nll": out.best_nll }),
            )
        }
    };
    fs::write(&args.params_out, calibrator.to_json() + "\n")
        .with_context(|| format!("writing {}", args.params_out.display()))?;
    let path = ctx.report_path("fit.json")?;
    write_json(&path, &details)?;
    let mut summary = format!(
        "fit {}: nll {:.6} -> {:.6}",
        details["mode"].as_str().unwrap_or_default(),
        details["uncalibrated_nll"].as_f64().unwrap_or(f64::NAN),
        details["nll"].as_f64().unwrap_or(f64::NAN)
    );
    if let Calibrator::Single { temperature } = calibrator {
        summary.push_str(&format!(" temperature={temperature:.6}"));
    }
    summary.push_str(&format!(" params={}", args.params_out.display()));
    Ok(summary)
}

fn load_calibrator(path: &Path) -> Result<Calibrator> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Calibrator::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn apply(_ctx: &RunContext, args: &ApplyArgs) -> Result<String> {
    let calibrator = load_calibrator(&args.params)?;
    let mut records = read_records(&args.logs)?;
    if matches!(calibrator, Calibrator::Variable(_)) {
        records = with_features(records, args.delta)?;
    }
    let cfg = FeatureConfig::new(args.delta)?;
    let out = records
        .iter()
        .map(|r| {
            calibrator
                .apply_record(r, &cfg)
                .with_context(|| format!("record ({}, t={})", r.seq_id, r.t))
        })
        .collect::<Result<Vec<_>>>()?;
    write_records(&args.logs_out, &out)?;
    Ok(format!(
        "applied calibrator to {} records -> {}",
        out.len(),
        args.logs_out.display()
    ))
}

fn load_task(path: &Path) -> Result<TrueModel> {
    let spec: ToyTaskSpec = load_json(path)?;
    Ok(build_true_model(&spec)?)
}

fn load_distortion(path: &Path) -> Result<DistortionSpec> {
    let d: DistortionSpec = load_json(path)?;
    d.validate()?;
    Ok(d)
}

/// Runs `$body` with `$m` bound to the requested model: the true task
/// model or a distorted copy, optionally wrapped in a calibrator.
macro_rules! with_model {
    ($task:expr, $distortion:expr, $calibrator:expr, $features:expr, |$m:ident| $body:expr) => {{
        let task: &TrueModel = $task;
        match ($distortion, $calibrator) {
            (None, None) => {
                let $m = task.clone();
                $body
            }
            (None, Some(c)) => {
                let $m = RecalibratedModel::new(task.clone(), c, $features);
                $body
            }
            (Some(d), None) => {
                let $m = distort(task.clone(), d, $features)?;
                $body
            }
            (Some(d), Some(c)) => {
                let $m = RecalibratedModel::new(distort(task.clone(), d, $features)?, c, $features);
                $body
            }
        }
    }};
}

fn decode_config(task: &TrueModel, beam: usize) -> BeamConfig {
    BeamConfig {
        beam_width: beam,
        max_len: task.max_output_len(),
        length_normalize: false,
    }
}

pub fn seqcal(ctx: &RunContext, args: &SeqcalArgs) -> Result<String> {
    let task = load_task(&args.task)?;
    let distortion = match args.model.as_str() {
        "true" => None,
        path => Some(load_distortion(Path::new(path))?),
    };
    let calibrator = args.params.as_deref().map(load_calibrator).transpose()?;
    let features = FeatureConfig::new(args.delta)?;
    let bins = BinningConfig::new(args.bins as usize)?;
    let result = with_model!(&task, distortion, calibrator, features, |m| {
        let cfg = decode_config(&task, args.beam as usize);
        sequence_calibration_experiment(&m, &task, args.n, args.samples as usize, bins, &cfg, ctx.seed)?
    });
    let report = MetricReport::new("structured_ece", &result.report);
    let path = write_metric(ctx, "structured_ece", &report)?;
    write_json(&ctx.report_path("sequence_points.json")?, &result.points)?;
    Ok(format!(
        "structured_ece={:.6} sources={} samples={} report={}",
        report.score,
        args.n,
        args.samples,
        path.display()
    ))
}

pub fn toy_gen(ctx: &RunContext, args: &GenArgs) -> Result<String> {
    let task = load_task(&args.spec)?;
    let distortion = args.distort.as_deref().map(load_distortion).transpose()?;
    let features = FeatureConfig::new(args.delta)?;
    let seqs = with_model!(&task, distortion, None::<Calibrator>, features, |m| {
        emit_logs(&m, &task, args.n, ctx.seed, &features)?
    });
    let records = flatten_sequences(&seqs);
    write_records(&args.logs_out, &records)?;
    Ok(format!(
        "wrote {} records from {} sequences -> {}",
        records.len(),
        seqs.len(),
        args.logs_out.display()
    ))
}

pub fn toy_beamsweep(ctx: &RunContext, args: &BeamsweepArgs) -> Result<String> {
    if args.n_eval == 0 {
        bail!("--n-eval must be at least 1");
    }
    let task = load_task(&args.spec)?;
    let distortion = args.distort.as_deref().map(load_distortion).transpose()?;
    let calibrator = args.params.as_deref().map(load_calibrator).transpose()?;
    let features = FeatureConfig::new(args.delta)?;
    let beams: Vec<usize> = args.beams.iter().map(|&b| b as usize).collect();
    let rows = with_model!(&task, distortion, calibrator, features, |m| {
        let cfg = decode_config(&task, 1);
        beam_sweep(&m, &task, &beams, args.n_eval, &cfg, ctx.seed)?
    });
    let path = ctx.report_path("beamsweep.json")?;
    write_json(&path, &rows)?;
    let mut w = csv::Writer::from_path(ctx.report_path("beamsweep.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("B={}:{:.4}", r.beam, r.corpus_bleu))
        .collect();
    Ok(format!("corpus_bleu {} report={}", table.join(" "), path.display()))
}
