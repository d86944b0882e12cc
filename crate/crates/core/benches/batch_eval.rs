use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attnflow_core::flowmodel::{AttentionKind, FlowModel, ModelConfig};
use attnflow_core::numkit::Tensor;
use attnflow_core::par::Execution;
use attnflow_core::training::loss_and_grads;

fn model(attention: AttentionKind) -> FlowModel {
    let mut m = FlowModel::build(ModelConfig {
        attention,
        ..ModelConfig::default()
    })
    .expect("model");
    m.initialize_identity();
    m
}

fn modes() -> Vec<(&'static str, Execution)> {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    vec![
        ("sequential", Execution::Sequential),
        ("parallel", Execution::with_threads(threads)),
    ]
}

fn bench_loss_and_grads(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(10);
    for attention in [AttentionKind::None, AttentionKind::IMap, AttentionKind::ISdp] {
        let m = model(attention);
        let x = Tensor::uniform(m.input_shape(32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, attention), &x, |b, x| {
                b.iter(|| loss_and_grads(&m, x, None, 8, exec).expect("loss"))
            });
        }
    }
    group.finish();
}

fn bench_roundtrip_suite(c: &mut Criterion) {
    use attnflow_core::verify::{layer_roundtrips, SuiteOptions};
    let mut group = c.benchmark_group("layer_roundtrips");
    group.sample_size(10);
    for (name, exec) in modes() {
        let opts = SuiteOptions {
            exec,
            ..SuiteOptions::default()
        };
        group.bench_function(name, |b| b.iter(|| layer_roundtrips(&opts)));
    }
    group.finish();
}

criterion_group!(benches, bench_loss_and_grads, bench_roundtrip_suite);
criterion_main!(benches);
