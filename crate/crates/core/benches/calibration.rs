use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use domcal::cve::local_contrast;
use domcal::synth::{distractor_scenario, ScenarioConfig};
use domcal::{retrieve, Execution, GalleryIndex, Grid, IndexConfig, RetrievalConfig};

fn scenario(items: usize) -> domcal::synth::Scenario {
    let cfg = ScenarioConfig {
        items,
        distractors: items / 5,
        grid: Grid::new(14, 14),
        token_dim: 64,
        joint_dim: 32,
        ..Default::default()
    };
    distractor_scenario(1, &cfg).expect("valid scenario")
}

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    if Execution::parallel_available() {
        m.push(("parallel", Execution::Parallel));
    }
    m
}

fn index_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("index_build");
    for items in [64, 256] {
        let s = scenario(items);
        let cfg = IndexConfig::default();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, items), &s.visuals, |b, visuals| {
                b.iter(|| GalleryIndex::build(black_box(visuals), &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval");
    for items in [64, 256] {
        let s = scenario(items);
        let index = GalleryIndex::build(&s.visuals, &IndexConfig::default(), Execution::Sequential)
            .unwrap();
        let cfg = RetrievalConfig::default();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, items), &s.texts, |b, texts| {
                b.iter(|| retrieve(black_box(texts), &index, &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn contrast(c: &mut Criterion) {
    let grid = Grid::new(14, 14);
    let attention: Vec<f64> = (0..grid.len())
        .map(|i| ((i * 37) % 101) as f64 / 5000.0)
        .collect();
    c.bench_function("local_contrast_14x14", |b| {
        b.iter(|| local_contrast(black_box(&attention), grid, 1e-6).unwrap())
    });
}

criterion_group!(benches, index_build, retrieval, contrast);
criterion_main!(benches);
