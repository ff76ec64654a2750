use attrlab::alignment::dcns;
use attrlab::gradients::head_hessian;
use attrlab::model::forward;
use attrlab::neuron_attribution::{attribute_neurons, RankedNeurons};
use attrlab::{AttributionConfig, AttributionEngine, ScoreMethod, TargetClass};
use attrlab_bench::fixture;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn benches(c: &mut Criterion) {
    let fx = fixture(500);
    let inst = &fx.data.test.instances[0];
    let tokens = inst.tokens();

    c.bench_function("forward", |b| {
        b.iter(|| forward(black_box(&fx.params), black_box(&tokens), None).unwrap())
    });

    c.bench_function("attribute_neurons_m20", |b| {
        b.iter(|| attribute_neurons(&fx.params, black_box(inst), 20, TargetClass::Predicted).unwrap())
    });

    c.bench_function("head_hessian_500", |b| {
        b.iter(|| head_hessian(&fx.params, black_box(&fx.data.train), 1e-2).unwrap())
    });

    let engine = AttributionEngine::new(&fx.params, &fx.data.train, AttributionConfig::default());
    engine.hessian_factor().unwrap();
    c.bench_function("if_scores_one_test", |b| {
        b.iter(|| engine.instance_scores(ScoreMethod::If, black_box(inst)).unwrap())
    });

    let a = attribute_neurons(&fx.params, &fx.data.test.instances[0], 20, TargetClass::Predicted).unwrap();
    let z = attribute_neurons(&fx.params, &fx.data.test.instances[1], 20, TargetClass::Predicted).unwrap();
    let ra = RankedNeurons::from_entries(a.iter().collect()).truncated(10);
    let rz = RankedNeurons::from_entries(z.iter().collect()).truncated(10);
    c.bench_function("dcns_r10", |b| b.iter(|| dcns(black_box(&ra), black_box(&rz), 10)));
}

criterion_group!(attribution, benches);
criterion_main!(attribution);
