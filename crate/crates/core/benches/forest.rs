//! Training and batch prediction on a single thread versus the full pool.
//!
//! Built without the `parallel` feature, only the sequential path runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grf::simulation::{generate, DesignKind, DesignSpec};
use grf::{Dataset, Forest, ForestOptions, MomentModel};

fn workload() -> (Dataset, Vec<Vec<f64>>) {
    let design = DesignSpec {
        heterogeneity: true,
        ..DesignSpec::new(DesignKind::Causal, 2000, 10)
    }
    .with_seed(1);
    let sim = generate(&design).expect("valid design");
    let queries = (0..200).map(|i| sim.data.row(i)).collect();
    (sim.data, queries)
}

fn options() -> ForestOptions {
    ForestOptions {
        num_trees: 200,
        seed: 7,
        ..ForestOptions::default()
    }
}

/// `(label, worker threads)` pairs to compare.
fn modes() -> Vec<(String, usize)> {
    let mut modes = vec![("sequential".to_string(), 1)];
    if cfg!(feature = "parallel") {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        modes.push((format!("pool-{n}"), n));
    }
    modes
}

/// Runs closures on a dedicated pool of the requested size.
struct Runner {
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl Runner {
    #[cfg(feature = "parallel")]
    fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        Runner { pool }
    }

    #[cfg(not(feature = "parallel"))]
    fn new(_threads: usize) -> Self {
        Runner {}
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        #[cfg(feature = "parallel")]
        return self.pool.install(f);
        #[cfg(not(feature = "parallel"))]
        f()
    }
}

fn bench_train(c: &mut Criterion) {
    let (data, _) = workload();
    let mut group = c.benchmark_group("train_partial_effect");
    group.sample_size(10);
    for (label, threads) in modes() {
        let runner = Runner::new(threads);
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| {
                runner.run(|| {
                    black_box(
                        Forest::train(data.clone(), MomentModel::PartialEffect, options()).unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (data, queries) = workload();
    let forest = Forest::train(data, MomentModel::PartialEffect, options()).unwrap();
    let mut group = c.benchmark_group("predict_batch_200");
    for (label, threads) in modes() {
        let runner = Runner::new(threads);
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| runner.run(|| black_box(forest.predict_batch(&queries))))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train, bench_predict);
criterion_main!(benches);
