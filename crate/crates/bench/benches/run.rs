use criterion::{criterion_group, criterion_main, Criterion};
use dynslam_bench::Fixture;
use dynslam_core::sim::NoiseLevel;

fn full_run(c: &mut Criterion) {
    let level = NoiseLevel::Grid { process: 1, measurement: 1 };
    let mut group = c.benchmark_group("run");
    group.sample_size(20);
    for (name, drop_history) in [("std_drop_history", true), ("std_keep_history", false)] {
        let fx = Fixture::new(level, drop_history);
        group.bench_function(name, |b| b.iter(|| fx.full_run(fx.standard())));
    }
    group.finish();
}

criterion_group!(benches, full_run);
criterion_main!(benches);
