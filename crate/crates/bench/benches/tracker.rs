use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use siamq_bench::scene;
use siamq_core::siamnet::build_backbone;
use siamq_core::tracker::{self, TrackerHyper};
use siamq_core::QuantConfig;

fn tracker_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("tracker_step");
    group.sample_size(10);
    let (first, bbox) = scene(160.0, 120.0, 40.0);
    let (next, _) = scene(163.0, 118.0, 40.0);
    for (name, cfg) in [("fp32", QuantConfig::FP32), ("binary", QuantConfig::BINARY)] {
        let net = build_backbone(cfg, 7).unwrap().into_inference();
        let state = tracker::init(&net, &first, bbox, TrackerHyper::default()).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut s = state.clone();
                s.step(&net, black_box(&next)).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, tracker_step);
criterion_main!(benches);
