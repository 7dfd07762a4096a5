use align3d::diffcore::kernels::gemm_nn;
use align3d::probes::knn_accuracy;
use align3d::stack::{sample_forward, PROMPT_CAPTION};
use align3d::trainer::sample_step;
use align3d::{lm, Graph, Task};
use align3d_bench::{default_model, features};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn");
    for n in [32usize, 64, 128] {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 7) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 5) as f32 * 0.2).collect();
        let mut out = vec![0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                gemm_nn(n, n, n, black_box(&a), black_box(&b), &mut out);
            })
        });
    }
    group.finish();
}

fn model_passes(c: &mut Criterion) {
    let (model, sample, grouping) = default_model();
    let prompt = model.encode_text(PROMPT_CAPTION).unwrap();
    let answer = model.vocab.tokenize(&sample.caption);
    c.bench_function("forward_caption", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.params);
            let f = sample_forward(&mut g, &model.cfg, &grouping, &prompt, &answer).unwrap();
            black_box(lm::ntp_loss(&mut g, &f.hidden, &f.asm.targets, &f.asm.mask).unwrap());
        })
    });
    c.bench_function("forward_backward_caption", |b| {
        b.iter(|| black_box(sample_step(&model, &sample, &grouping, Task::Caption, None, 1.0).unwrap()))
    });
    c.bench_function("greedy_decode_instruct", |b| {
        b.iter(|| black_box(model.decode(&grouping, Task::Instruct).unwrap()))
    });
}

fn knn(c: &mut Criterion) {
    let (feats, labels) = features(100, 64, 10);
    c.bench_function("knn_loo_100x64_k10", |b| {
        b.iter(|| black_box(knn_accuracy(black_box(&feats), &labels, 10).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = gemm, model_passes, knn
}
criterion_main!(benches);
