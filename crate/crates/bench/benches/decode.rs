use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use seqcal_bench::default_task;
use seqcal_core::sequence::{beam_search, expected_bleu};
use seqcal_core::BeamConfig;

fn bench_beam(c: &mut Criterion) {
    let task = default_task();
    let source = [3, 1, 4, 1, 5, 9, 2, 6];
    let mut group = c.benchmark_group("beam_search");
    for width in [1usize, 4, 16] {
        let cfg = BeamConfig {
            beam_width: width,
            max_len: 20,
            length_normalize: false,
        };
        group.bench_with_input(BenchmarkId::from_parameter(width), &cfg, |b, cfg| {
            b.iter(|| beam_search(&task, black_box(&source), cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_expected_bleu(c: &mut Criterion) {
    let task = default_task();
    let source = [3, 1, 4, 1, 5, 9, 2, 6];
    let prediction = beam_search(&task, &source, &BeamConfig::default()).unwrap()[0]
        .tokens
        .clone();
    c.bench_function("expected_bleu_100_samples", |b| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        b.iter(|| expected_bleu(&task, &source, black_box(&prediction), 100, 20, &mut rng).unwrap())
    });
}

criterion_group!(benches, bench_beam, bench_expected_bleu);
criterion_main!(benches);
