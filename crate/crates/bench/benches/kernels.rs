use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hotspot_core::baselines::{gray_levels, histogram, kmeans_lab_segment, multilevel_otsu_segment, otsu_thresholds};
use hotspot_core::data::{generate_synthetic_dataset, SyntheticConfig};
use hotspot_core::detect::{BatchSource, Classifier, ImageSet};
use hotspot_core::isolate::gradcam_heatmap;
use hotspot_core::metrics::auc_roc;
use hotspot_core::nn::Mode;
use hotspot_core::ssl::{pair_loss, EncoderSpec, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = || (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (p1, z1, p2, z2) = (v(), v(), v(), v());
    let cfg = LossConfig::default();
    c.bench_function("compound_pair_loss_2048", |b| {
        b.iter(|| pair_loss(black_box(&p1), &z1, &p2, &z2, &cfg).unwrap())
    });
}

fn segmenters(c: &mut Criterion) {
    let images = generate_synthetic_dataset(&SyntheticConfig {
        n_images: 2,
        anomalous_fraction: 1.0,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let img = &images[0];
    let hist = histogram(&gray_levels(img));
    for n in [1, 2, 4] {
        c.bench_function(&format!("otsu_thresholds_n{n}"), |b| b.iter(|| otsu_thresholds(black_box(&hist), n).unwrap()));
    }
    c.bench_function("multilevel_otsu_segment_224", |b| b.iter(|| multilevel_otsu_segment(black_box(img), 4, 2).unwrap()));
    c.bench_function("kmeans_lab_segment_224", |b| b.iter(|| kmeans_lab_segment(black_box(img), 2, 0).unwrap()));
}

fn network(c: &mut Criterion) {
    let images = generate_synthetic_dataset(&SyntheticConfig {
        n_images: 8,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut model = Classifier::random(EncoderSpec::tiny(), &mut ChaCha8Rng::seed_from_u64(1));
    let x = ImageSet::new(&images).batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut g = c.benchmark_group("tiny_classifier");
    g.sample_size(10);
    g.bench_function("forward_batch8", |b| b.iter(|| model.logits(black_box(&x), Mode::Infer).unwrap()));
    g.bench_function("gradcam_224", |b| b.iter(|| gradcam_heatmap(&mut model, black_box(&images[0]), 1).unwrap()));
    g.finish();
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let truth: Vec<_> = (0..10_000)
        .map(|i| if i % 3 == 0 { hotspot_core::data::Label::Anomalous } else { hotspot_core::data::Label::Normal })
        .collect();
    c.bench_function("auc_roc_10k", |b| b.iter(|| auc_roc(black_box(&scores), &truth).unwrap()));
}

criterion_group!(benches, losses, segmenters, network, ranking);
criterion_main!(benches);
