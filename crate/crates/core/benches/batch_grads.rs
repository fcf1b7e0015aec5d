//! Compares the rayon batch gradient path against the sequential fallback.
//!
//! Both paths reduce per-sample gradients in index order, so they produce
//! bit-identical results; the only difference is wall-clock time.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pvlr_core::config::TrainConfig;
use pvlr_core::train::{batch_grads_sequential, Session};

#[cfg(feature = "parallel")]
use pvlr_core::train::batch_grads_parallel;

fn bench_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.head.c = 8;
    cfg.head.d = 16;
    cfg.head.m = 8;
    cfg.dataset.c = 8;
    cfg.dataset.k = 3;
    cfg.dataset.d = 16;
    cfg.dataset.m = 16;
    cfg.dataset.n_placements = 1;
    cfg.dataset.train_size = 64;
    cfg.dataset.test_size = 16;
    cfg.head.l = 2;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg
}

fn batch_grads_bench(c: &mut Criterion) {
    let cfg = bench_config();
    let session = Session::new(cfg.clone()).expect("session");
    let indices: Vec<usize> = (0..cfg.batch_size).collect();

    let mut group = c.benchmark_group("batch_grads");
    group.sample_size(20);

    group.bench_with_input(BenchmarkId::new("sequential", cfg.batch_size), &indices, |b, idx| {
        b.iter(|| {
            batch_grads_sequential(
                &session.model,
                &session.store,
                &session.splits.train,
                idx,
                &session.config.loss,
            )
            .expect("sequential batch")
        })
    });

    #[cfg(feature = "parallel")]
    group.bench_with_input(BenchmarkId::new("parallel", cfg.batch_size), &indices, |b, idx| {
        b.iter(|| {
            batch_grads_parallel(
                &session.model,
                &session.store,
                &session.splits.train,
                idx,
                &session.config.loss,
            )
            .expect("parallel batch")
        })
    });

    group.finish();
}

criterion_group!(benches, batch_grads_bench);
criterion_main!(benches);
