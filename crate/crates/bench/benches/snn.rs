use criterion::{black_box, criterion_group, criterion_main, Criterion};
use quartz_bench::{normalized_model, random_inputs};
use quartz_core::oracle::oracle_forward;
use quartz_core::{convert, simulate, ConversionOptions, TraceLevel};

fn bench(c: &mut Criterion) {
    for arch in ["784-128-10", "lenet"] {
        let model = normalized_model(arch);
        let input = random_inputs(model.input_shape(), 1, 3).remove(0);
        let net = convert(&model, 16, ConversionOptions::default()).unwrap();

        c.bench_function(&format!("forward/{arch}"), |b| {
            b.iter(|| model.forward(black_box(&input), false).unwrap())
        });
        c.bench_function(&format!("simulate/{arch}/T16"), |b| {
            b.iter(|| simulate(&net, black_box(&input), &TraceLevel::Off).unwrap())
        });
        c.bench_function(&format!("oracle/{arch}/T16"), |b| {
            b.iter(|| oracle_forward(&net, black_box(&input)).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
