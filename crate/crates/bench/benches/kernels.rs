use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nars::metagraph::{extract_subgraph, RelationSubset};
use nars::model::{aggregate, aggregate_backward, Activation, ModelConfig, NarsModel, Targets};
use nars::propagate::gen_neighbor_features;
use nars::{AggCoefficients, Matrix, Task};
use nars_bench::{academic_graph, random_matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn propagation(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate");
    group.sample_size(10);
    for n in [10_000usize, 50_000] {
        let g = academic_graph(n, 1);
        let sub = extract_subgraph(&g, RelationSubset::from_mask(0b111).unwrap(), true);
        let h0 = random_matrix::<f32>(n, 64, 2);
        group.throughput(Throughput::Elements((sub.num_edges() * 64 * 3) as u64));
        group.bench_with_input(BenchmarkId::new("L3_D64", n), &n, |b, _| {
            b.iter(|| gen_neighbor_features(0, &sub, &h0, 3).unwrap())
        });
    }
    group.finish();
}

fn hops(k: usize, levels: usize, rows: usize, d: usize) -> Vec<Vec<Matrix<f32>>> {
    (0..k).map(|i| (0..levels).map(|l| random_matrix(rows, d, (i * levels + l) as u64)).collect()).collect()
}

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregate");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [2usize, 8] {
        let h = hops(k, 3, 4096, 64);
        let a = AggCoefficients::<f32>::random(k, 3, 64, &mut rng);
        let dx: Vec<Matrix<f32>> = (0..3).map(|l| random_matrix(4096, 64, 100 + l)).collect();
        group.bench_with_input(BenchmarkId::new("forward_B4096_D64", k), &k, |b, _| b.iter(|| aggregate(&h, &a).unwrap()));
        group.bench_with_input(BenchmarkId::new("backward_B4096_D64", k), &k, |b, _| {
            b.iter(|| aggregate_backward(&h, &dx, &a).unwrap())
        });
    }
    group.finish();
}

fn classifier(c: &mut Criterion) {
    let mut group = c.benchmark_group("classifier");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        in_dim: 64,
        proj_dim: None,
        hidden: 64,
        levels: 3,
        classes: 16,
        dropout: 0.5,
        activation: Activation::Prelu,
        task: Task::SingleLabel,
    };
    let model = NarsModel::<f32>::new(cfg, &mut rng).unwrap();
    let x: Vec<Matrix<f32>> = (0..3).map(|l| random_matrix(4096, 64, 200 + l)).collect();
    let y = Targets::Classes((0..4096).map(|r| (r % 16) as u32).collect());
    group.bench_function("forward_eval_B4096", |b| b.iter(|| model.forward(&x, None).unwrap()));
    group.bench_function("loss_and_grads_B4096", |b| {
        b.iter(|| model.loss_and_grads(&x, &y, Some(&mut rng)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, propagation, aggregation, classifier);
criterion_main!(benches);
