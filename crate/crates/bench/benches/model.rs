use criterion::{criterion_group, criterion_main, Criterion};
use sarcscore::dsarcnet::build_dsarcnet;
use sarcscore::nn::Mode;
use sarcscore::patchnet::{build_patchnet, infer_maturity_map};
use sarcscore::pipeline::prepare_cell;
use sarcscore::{DSarcNetConfig, PatchNetConfig, PrepareOptions};
use sarcscore_bench::striped_image;

fn bench_model(c: &mut Criterion) {
    let image = striped_image(160, 160);
    let cell = prepare_cell(&image, None, None, &PrepareOptions::default()).unwrap();
    let cells = vec![cell; 4];
    let mut model = build_dsarcnet::<f32>(&DSarcNetConfig::toy()).unwrap();

    let mut group = c.benchmark_group("toy model");
    group.sample_size(10);
    group.bench_function("predict batch 4", |b| b.iter(|| model.predict_cells(&cells).unwrap()));
    group.bench_function("train step batch 4", |b| {
        let refs: Vec<_> = cells.iter().collect();
        b.iter(|| {
            let (raw, stack) = sarcscore::dsarcnet::batch_inputs::<f32>(&refs);
            let y = model.forward(raw, stack, Mode::Train).unwrap();
            model.backward(y);
        })
    });
    let mut patchnet = build_patchnet(&PatchNetConfig::toy()).unwrap();
    group.bench_function("maturity map 160x160", |b| {
        b.iter(|| infer_maturity_map(&mut patchnet, &image, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_model);
criterion_main!(benches);
