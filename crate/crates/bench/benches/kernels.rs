use std::hint::black_box;

use c2sdg_core::fft::{fft2, ifft2};
use c2sdg_core::rng::stream;
use c2sdg_core::styleaug::{low_freq_swap, make_style_batch};
use c2sdg_core::{AugConfig, Graph, StyleMode, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn conv(c: &mut Criterion) {
    let mut rng = stream(1, &[]);
    let x = Tensor::randn(&[8, 32, 64, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    c.bench_function("conv2d 8x32x64x64 3x3 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone()).unwrap();
            let wv = g.input(w.clone()).unwrap();
            black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d 8x32x64x64 3x3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let wv = g.leaf(w.clone()).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn fourier(c: &mut Criterion) {
    let samples = c2sdg_bench::source_samples(4);
    let plane = samples[0].image.plane(0).to_vec();
    c.bench_function("fft2+ifft2 64x64", |b| {
        b.iter(|| black_box(ifft2(&fft2(&plane, 64, 64).unwrap()).unwrap()))
    });
    c.bench_function("low_freq_swap 3x64x64", |b| {
        b.iter(|| black_box(low_freq_swap(&samples[0].image, &samples[1].image, 0.1).unwrap()))
    });
    let cfg = AugConfig::default();
    for mode in [StyleMode::BA, StyleMode::SL, StyleMode::FR] {
        c.bench_function(&format!("style batch {} x4", mode.as_str()), |b| {
            b.iter(|| {
                let mut rngs: Vec<_> = (0..4).map(|i| stream(2, &[i])).collect();
                black_box(make_style_batch(&samples, mode, &cfg, &mut rngs).unwrap())
            })
        });
    }
}

criterion_group!(benches, conv, fourier);
criterion_main!(benches);
