use criterion::{black_box, criterion_group, criterion_main, Criterion};
use seqcal_bench::distorted_records;
use seqcal_core::metrics::{ece, weighted_ece};
use seqcal_core::recalibrate::{
    fit_single_temperature, loss_and_gradient, CalibratorParams, TrainConfig, ValidationSet,
};
use seqcal_core::BinningConfig;

fn bench_metrics(c: &mut Criterion) {
    let records = distorted_records(2000, 0.5, 1);
    let bins = BinningConfig::default();
    c.bench_function("ece_2k_sequences", |b| {
        b.iter(|| ece(black_box(&records), bins).unwrap())
    });
    c.bench_function("weighted_ece_2k_sequences", |b| {
        b.iter(|| weighted_ece(black_box(&records), bins).unwrap())
    });
}

fn bench_fitting(c: &mut Criterion) {
    let records = distorted_records(500, 0.5, 2);
    let data = ValidationSet::new(&records).unwrap();
    let params = CalibratorParams::initial(&TrainConfig::default());
    c.bench_function("loss_and_gradient_500_sequences", |b| {
        b.iter(|| loss_and_gradient(black_box(&params), &data))
    });
    c.bench_function("fit_single_temperature_500_sequences", |b| {
        b.iter(|| fit_single_temperature(black_box(&data)).unwrap())
    });
}

criterion_group!(benches, bench_metrics, bench_fitting);
criterion_main!(benches);
