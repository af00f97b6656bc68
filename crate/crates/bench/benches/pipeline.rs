use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flim_bench::{kernel_bank, trained_model, training_set, SEED};
use flim_core::encoder::{apply_norm, build_patch_dataset, compute_norm_stats, estimate_kernels, DEFAULT_EPSILON};
use flim_core::{convolve, detect, Architecture, ImageTensor, MarkedImage};

fn bench_convolve(c: &mut Criterion) {
    let mut group = c.benchmark_group("convolve");
    for (channels, dilation) in [(1, 1), (32, 2)] {
        let image = ImageTensor::from_fn(128, 128, channels, |r, col, b| ((r * 3 + col * 5 + b) % 17) as f32 / 17.0)
            .unwrap();
        let bank = kernel_bank(32, 3, channels);
        group.bench_with_input(
            BenchmarkId::new("128x128_k3x32", format!("c{channels}_d{dilation}")),
            &(image, bank),
            |b, (image, bank)| b.iter(|| convolve(black_box(image), black_box(bank), dilation).unwrap()),
        );
    }
    group.finish();
}

fn bench_estimate_kernels(c: &mut Criterion) {
    let (training, _) = training_set(128);
    let arch = Architecture::parasite();
    let spec = arch.layers[0].spec;
    let items: Vec<MarkedImage<'_>> = training
        .iter()
        .map(|t| MarkedImage { image: &t.image, markers: &t.markers })
        .collect();
    let stats = compute_norm_stats(&items, DEFAULT_EPSILON).unwrap();
    let normalized: Vec<ImageTensor> = training.iter().map(|t| apply_norm(&t.image, &stats).unwrap()).collect();
    let norm_items: Vec<MarkedImage<'_>> = normalized
        .iter()
        .zip(&training)
        .map(|(image, t)| MarkedImage { image, markers: &t.markers })
        .collect();
    let dataset = build_patch_dataset(&norm_items, &spec, 1).unwrap();
    c.bench_function("estimate_kernels/layer1_parasite", |b| {
        b.iter(|| estimate_kernels(black_box(&dataset), &spec, SEED).unwrap())
    });
}

fn bench_detect(c: &mut Criterion) {
    let mut group = c.benchmark_group("detect");
    group.sample_size(20);
    for arch in [Architecture::parasite(), Architecture::ship()] {
        let (training, holdout) = training_set(128);
        let model = trained_model(&arch, training);
        let name = format!("{:?}", arch.heuristic).to_lowercase();
        group.bench_function(BenchmarkId::new("128x128", name), |b| {
            b.iter(|| detect(black_box(&holdout), &model, "bench").unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_convolve, bench_estimate_kernels, bench_detect);
criterion_main!(benches);
