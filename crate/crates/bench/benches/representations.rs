use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sarcscore::representations::{dft2, fft_power_map, sobel_gradient_magnitude};
use sarcscore_bench::striped_image;

fn bench_representations(c: &mut Criterion) {
    let image = striped_image(256, 256);
    let window = image.pixels().slice(ndarray::s![0..96, 0..96]).to_owned();
    c.bench_function("dft2 96x96", |b| b.iter(|| dft2(black_box(window.view())).unwrap()));
    c.bench_function("fft_power_map 256x256", |b| {
        b.iter(|| fft_power_map(black_box(&image), 96, 8, false).unwrap())
    });
    c.bench_function("sobel 256x256", |b| b.iter(|| sobel_gradient_magnitude(black_box(&image)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_representations
}
criterion_main!(benches);
