//! Batch embedding and stage evaluation: data-parallel fan-out versus the
//! sequential reference path. Build with `--no-default-features` to measure
//! the pure sequential crate as well.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use aper_core::backbone::{Backbone, VitSpec};
use aper_core::data::{generate_synthetic, SyntheticConfig, Tensor};
use aper_core::embedder::{embed_batch, embed_batch_sequential};
use aper_core::prototype::{compute_prototypes, PrototypeBank};

fn setup(n_classes: usize, per_class: usize) -> (Backbone, Vec<Tensor>, PrototypeBank) {
    let spec = VitSpec {
        image: [3, 16, 16],
        patch: 8,
        dim: 64,
        heads: 4,
        mlp_ratio: 4,
        blocks: 2,
        final_norm: true,
    };
    let mut backbone = Backbone::new_toy_vit(spec, 7).unwrap();
    backbone.freeze();
    let cfg = SyntheticConfig {
        classes: n_classes,
        train_per_class: per_class,
        test_per_class: per_class,
        shape: vec![3, 16, 16],
        mean_separation: 1.0,
        noise_std: 0.3,
        shift: None,
    };
    let (train, test) = generate_synthetic(&cfg, 3).unwrap();
    let classes: Vec<usize> = (0..n_classes).collect();
    let protos = compute_prototypes(&backbone, &train, &classes).unwrap();
    let mut bank = PrototypeBank::new(64);
    for (c, p) in protos {
        bank.register(c, p).unwrap();
    }
    let inputs: Vec<Tensor> = test.into_iter().map(|e| e.input).collect();
    (backbone, inputs, bank)
}

fn bench_embed_batch(c: &mut Criterion) {
    let (backbone, inputs, _) = setup(8, 16);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let mut group = c.benchmark_group("embed_batch");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("default", refs.len()), &refs, |b, refs| {
        b.iter(|| embed_batch(&backbone, refs).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("sequential", refs.len()), &refs, |b, refs| {
        b.iter(|| embed_batch_sequential(&backbone, refs).unwrap())
    });
    group.finish();
}

fn bench_classify(c: &mut Criterion) {
    let (backbone, inputs, bank) = setup(8, 16);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let mut group = c.benchmark_group("classify_batch");
    group.sample_size(10);
    group.bench_function("default", |b| {
        b.iter(|| {
            aper_core::parallel::map_ordered(&refs, |x| {
                bank.predict(&backbone.embed(x).unwrap()).unwrap()
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            aper_core::parallel::map_sequential(&refs, |x| {
                bank.predict(&backbone.embed(x).unwrap()).unwrap()
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_embed_batch, bench_classify);
criterion_main!(benches);
