use std::hint::black_box;

use c2sdg_core::rng::stream;
use c2sdg_core::styleaug::make_style_batch;
use c2sdg_core::trainer::train_step;
use c2sdg_core::{Arch, AugConfig, ModelState, StyleMode};
use criterion::{criterion_group, criterion_main, Criterion};

fn step(c: &mut Criterion) {
    let source = c2sdg_bench::source_samples(4);
    let mut rngs: Vec<_> = (0..4).map(|i| stream(3, &[i])).collect();
    let styled = make_style_batch(&source, StyleMode::BA, &AugConfig::default(), &mut rngs).unwrap();
    let mut group = c.benchmark_group("train_step 4x64x64");
    group.sample_size(10);
    for (name, cfd, aug) in [("full", true, true), ("baseline", false, false)] {
        let mut state = ModelState::new(Arch { cfd, ..Arch::default() }, 0, 0.99).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let view = aug.then_some(styled.as_slice());
                black_box(train_step(&mut state, &source, view, 1e-4, Some(1.0)).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
