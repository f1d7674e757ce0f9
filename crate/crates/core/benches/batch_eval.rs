//! Sequential vs rayon-parallel batch evaluation on the workloads that
//! dominate real runs: per-pair objective evaluation and heatmap grid
//! sweeps. Run with `cargo bench -p hypo-core`.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hypo_core::exec::{map_collect_par, map_collect_seq};
use hypo_core::math::{HyperParams, MarginPair};
use hypo_core::objectives::{evaluate, hypo_loss, ObjectiveKind};

fn random_pairs(n: usize, seed: u64) -> Vec<MarginPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| MarginPair::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)).unwrap())
        .collect()
}

fn bench_batch_objectives(c: &mut Criterion) {
    let hp = HyperParams::new(1.0).unwrap();
    let mut group = c.benchmark_group("batch_hypo_loss");
    for &n in &[10_000usize, 200_000] {
        let pairs = random_pairs(n, 7);
        group.bench_with_input(BenchmarkId::new("sequential", n), &pairs, |b, pairs| {
            b.iter(|| {
                black_box(map_collect_seq(pairs, |&p| {
                    hypo_loss(p, &hp, true).unwrap().loss
                }))
            })
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &pairs, |b, pairs| {
            b.iter(|| {
                black_box(map_collect_par(pairs, |&p| {
                    hypo_loss(p, &hp, true).unwrap().loss
                }))
            })
        });
    }
    group.finish();
}

fn bench_heatmap_grid(c: &mut Criterion) {
    let hp = HyperParams::new(1.0).unwrap();
    let n = 241usize;
    let coords: Vec<f64> = (0..n)
        .map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64)
        .collect();
    let row = |&dt: &f64| -> Vec<f64> {
        coords
            .iter()
            .map(|&dr| {
                evaluate(
                    ObjectiveKind::HypoHard,
                    MarginPair::new(dt, dr).unwrap(),
                    None,
                    &hp,
                )
                .unwrap()
                .weight
            })
            .collect()
    };
    let mut group = c.benchmark_group("heatmap_241x241");
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(map_collect_seq(&coords, row)))
    });
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(map_collect_par(&coords, row)))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_objectives, bench_heatmap_grid);
criterion_main!(benches);
