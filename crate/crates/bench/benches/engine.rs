use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mutransfer_bench::{desk_model, random_batch};
use mutransfer_core::harness::{desk_run, DeskScale};
use mutransfer_core::model::{bind_params, forward, ForwardOptions};
use mutransfer_core::optim::OptimizerConfig;
use mutransfer_core::{DiffTensor, Graph, OptimizerState};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = DiffTensor::<f32>::filled(vec![1024, n], 0.5);
        let b = DiffTensor::<f32>::filled(vec![n, n], 0.25);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let x = g.constant(a.clone());
                let y = g.constant(b.clone());
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for width in [64usize, 128] {
        let (params, _) = desk_model(width).unwrap();
        let batch = random_batch(params.config(), 16, 1);
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let vars = bind_params(&mut g, &params);
                let out = forward(&mut g, &params, &vars, &batch, ForwardOptions::default()).unwrap();
                g.backward(out.loss).unwrap();
                black_box(g.scalar(out.loss));
            })
        });
    }
    group.finish();
}

fn optimizer(c: &mut Criterion) {
    let (mut params, plan) = desk_model(128).unwrap();
    let mut cfg: OptimizerConfig = desk_run("unused", DeskScale::REDUCED).optimizer;
    cfg.total_steps = u64::MAX / 2;
    let grads: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![1e-3; t.len()]).collect();
    let mut state = OptimizerState::new(&cfg, params.tensors());
    c.bench_function("adamw_step/128", |bench| {
        bench.iter(|| state.step(&cfg, &plan, params.tensors_mut(), &grads).unwrap())
    });
}

criterion_group!(benches, matmul, train_step, optimizer);
criterion_main!(benches);
