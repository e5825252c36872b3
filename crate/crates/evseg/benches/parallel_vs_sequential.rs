//! Parallel vs sequential comparison for the data-parallel stages.
//!
//! The `*_seq` helpers in `evseg::par` stay available regardless of the
//! `parallel` feature, so each benchmark pits the dispatching entry point
//! (rayon under the default feature) against the sequential twin on the
//! same inputs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evseg::events::SensorGeometry;
use evseg::graph::{knn_graph_indices, EventGraph};
use evseg::gtnn::{ForwardMode, GtnnConfig, GtnnModel, StagePyramid};
use evseg::par;
use evseg::synth::{generate, SceneConfig};
use evseg::tensor::Tape;

fn random_positions(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..96.0),
                rng.gen_range(0.0..96.0),
                rng.gen_range(0.0..96.0),
            ]
        })
        .collect()
}

/// Exact kNN selection, sequential reference implementation.
fn knn_sequential(positions: &[[f64; 3]], k: usize) -> Vec<u32> {
    par::map_range_seq(positions.len(), |i| {
        let mut cands: Vec<(f64, u32)> = positions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, p)| {
                let d = (p[0] - positions[i][0]).powi(2)
                    + (p[1] - positions[i][1]).powi(2)
                    + (p[2] - positions[i][2]).powi(2);
                (d, j as u32)
            })
            .collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cands[..k].iter().map(|&(_, j)| j).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn bench_knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_graph");
    for &n in &[512usize, 2048] {
        let positions = random_positions(n, n as u64);
        group.bench_with_input(BenchmarkId::new("parallel", n), &positions, |b, p| {
            b.iter(|| knn_graph_indices(black_box(p), 16).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &positions, |b, p| {
            b.iter(|| knn_sequential(black_box(p), 16))
        });
    }
    group.finish();
}

fn bench_batch_forward(c: &mut Criterion) {
    let k = 8;
    let graphs: Vec<(EventGraph, StagePyramid)> = (0..8u64)
        .map(|seed| {
            let positions = random_positions(512, 100 + seed);
            let neighbors = knn_graph_indices(&positions, k).unwrap();
            let graph = EventGraph { features: positions.clone(), positions, neighbors, k };
            let pyramid =
                StagePyramid::build(&graph, &GtnnConfig::reduced([8, 16, 32], k)).unwrap();
            (graph, pyramid)
        })
        .collect();
    let model = GtnnModel::new(GtnnConfig::reduced([8, 16, 32], k), 1).unwrap();

    let run_one = |(graph, pyramid): &(EventGraph, StagePyramid)| {
        let mut tape = Tape::new();
        let pass = model
            .forward_on_tape(&mut tape, graph, pyramid, ForwardMode::Infer)
            .unwrap();
        tape.value(pass.output).get(0, 0)
    };

    let mut group = c.benchmark_group("batch_forward");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_slice(black_box(&graphs), run_one))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_slice_seq(black_box(&graphs), run_one))
    });
    group.finish();
}

fn bench_synth(c: &mut Criterion) {
    let config = SceneConfig {
        geometry: SensorGeometry::new(96, 96).unwrap(),
        duration_us: 100_000,
        ..SceneConfig::default()
    };
    let mut group = c.benchmark_group("synth_generate");
    group.sample_size(10);
    // `generate` parallelizes over rows internally through `par`; the
    // sequential twin is the same build without the feature:
    //   cargo bench --no-default-features
    group.bench_function("default_features", |b| {
        b.iter(|| generate(black_box(&config), 7).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_knn, bench_batch_forward, bench_synth);
criterion_main!(benches);
