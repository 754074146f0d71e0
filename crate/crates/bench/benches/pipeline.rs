use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use engage_bench::paired;
use engage_core::eval::wilcoxon_signed_rank;
use engage_core::preprocess::{preprocess_session, WindowSpec};
use engage_core::synth::{generate_session, SynthConfig};

fn wilcoxon(c: &mut Criterion) {
    let mut group = c.benchmark_group("wilcoxon");
    // 10 and 25 take the exact path, 40 the normal approximation.
    for n in [10, 25, 40] {
        let (a, b) = paired(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| wilcoxon_signed_rank(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn windowing(c: &mut Criterion) {
    let config = SynthConfig {
        duration_s: 600.0,
        ..SynthConfig::default()
    };
    let session = generate_session(&config, 0).unwrap();
    let spec = WindowSpec::default();
    c.bench_function("preprocess_session_600s", |b| b.iter(|| preprocess_session(&session, &spec).unwrap()));
}

criterion_group!(benches, wilcoxon, windowing);
criterion_main!(benches);
