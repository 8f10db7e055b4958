//! Parallel-vs-sequential comparison for the three data-parallel hot spots:
//! limit-table simulation, likelihood-ratio grid inversion, and replicate
//! batches. Build with `--no-default-features` to time the purely sequential
//! crate as a whole.

use criterion::{criterion_group, criterion_main, Criterion};
use isothresh::ci::{lr_stat_profile, lr_stat_profile_seq};
use isothresh::exec::{map_indexed, map_indexed_seq};
use isothresh::isotonic::pava;
use isothresh::sample::{Domain, SampleBatch};
use isothresh::sim::{draw_sample, TestFunction};
use isothresh::twostage::Psi;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn brownian_argmin_batch(paths: usize, parallel: bool) -> f64 {
    let k = 500;
    let step = 0.006f64;
    let sqrt_step = step.sqrt();
    let f = |path: usize| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(path as u64);
        let mut best_val = 0.0f64;
        let mut best_t = 0.0f64;
        for side in [1.0f64, -1.0] {
            let mut w = 0.0f64;
            for j in 1..=k {
                let z: f64 = StandardNormal.sample(&mut rng);
                w += sqrt_step * z;
                let t = side * j as f64 * step;
                if w + t * t < best_val {
                    best_val = w + t * t;
                    best_t = t;
                }
            }
        }
        best_t
    };
    let vals = if parallel { map_indexed(paths, f) } else { map_indexed_seq(paths, f) };
    vals.iter().sum()
}

fn bench_tabulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("brownian_argmin_2000_paths");
    g.bench_function("parallel", |b| b.iter(|| brownian_argmin_batch(2000, true)));
    g.bench_function("sequential", |b| b.iter(|| brownian_argmin_batch(2000, false)));
    g.finish();
}

fn noisy_batch(n: usize) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    draw_sample(
        &TestFunction::IsoSine,
        Psi::Uniform,
        n,
        0.1,
        Domain::new(0.0, 1.0).unwrap(),
        &mut rng,
    )
    .unwrap()
}

fn bench_lr_grid(c: &mut Criterion) {
    let batch = noisy_batch(500);
    let dom = Domain::new(0.0, 1.0).unwrap();
    let theta0 = TestFunction::IsoSine.m(0.5);
    let mut g = c.benchmark_group("lr_profile_500pts_2001grid");
    g.bench_function("parallel", |b| {
        b.iter(|| lr_stat_profile(&batch, theta0, 0.01, dom, 2001).unwrap())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| lr_stat_profile_seq(&batch, theta0, 0.01, dom, 2001).unwrap())
    });
    g.finish();
}

fn replicate_batch(reps: usize, parallel: bool) -> f64 {
    let dom = Domain::new(0.0, 1.0).unwrap();
    let f = |rep: usize| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(rep as u64);
        let batch =
            draw_sample(&TestFunction::Quadratic, Psi::Uniform, 400, 0.1, dom, &mut rng).unwrap();
        pava(&batch).unwrap().invert_threshold(0.25)
    };
    let vals = if parallel { map_indexed(reps, f) } else { map_indexed_seq(reps, f) };
    vals.iter().sum()
}

fn bench_replicates(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_replicates_200x400pts");
    g.bench_function("parallel", |b| b.iter(|| replicate_batch(200, true)));
    g.bench_function("sequential", |b| b.iter(|| replicate_batch(200, false)));
    g.finish();
}

criterion_group!(benches, bench_tabulation, bench_lr_grid, bench_replicates);
criterion_main!(benches);
