use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srf_core::eval::coco_metrics;
use srf_core::generator::generate;
use srf_core::train::ArchConfig;
use srf_core::{
    resize, Detection, DetectionTargets, Extractor, Generator, Graph, Interpolation, Mode, ResizeSpec, Tensor, Upsampler,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[2, 16, 32, 32]);
    let w = random(&mut rng, &[64, 16, 3, 3]);
    c.bench_function("conv3x3 16->64 32x32 fwd+bwd", |b| {
        b.iter(|| {
            let g = Graph::new();
            let y = g.input(x.clone()).conv2d(g.input(w.clone()), None, 1, 1);
            g.backward(y.sum()).unwrap()
        })
    });
}

fn generator(c: &mut Criterion) {
    let arch = ArchConfig::desk();
    let g = Generator::<f32>::with_width(arch.channels, arch.generator_width, 0).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[1, arch.channels, 16, 16]);
    c.bench_function("generator 16x16 -> 32x32", |b| b.iter(|| generate(&g, &x, 3, Mode::Eval).unwrap()));
}

fn extractor(c: &mut Criterion) {
    let arch = ArchConfig::desk();
    let g = Generator::<f32>::with_width(arch.channels, arch.generator_width, 0).unwrap();
    let naive = Extractor::new(arch.extractor(), Upsampler::Naive(Interpolation::Nearest), 0).unwrap();
    let srf = Extractor::new(arch.extractor(), Upsampler::Srf(g), 0).unwrap();
    let img = random(&mut ChaCha8Rng::seed_from_u64(2), &[1, 3, 128, 128]);
    c.bench_function("pyramid 128x128 nearest", |b| b.iter(|| naive.pyramid_tensors(&img).unwrap()));
    c.bench_function("pyramid 128x128 srf", |b| b.iter(|| srf.pyramid_tensors(&img).unwrap()));
}

fn resampling(c: &mut Criterion) {
    let x = random(&mut ChaCha8Rng::seed_from_u64(3), &[16, 64, 64]);
    for m in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
        c.bench_function(&format!("resize {} 64 -> 128", m.name()), |b| {
            b.iter(|| resize(&x, ResizeSpec::double(64, 64), m).unwrap())
        });
    }
}

fn scene(rng: &mut ChaCha8Rng, images: usize) -> (Vec<DetectionTargets>, Vec<Vec<Detection>>) {
    let bx = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(4.0..80.0), rng.random_range(4.0..80.0));
        [rng.random_range(0.0..256.0 - w), rng.random_range(0.0..256.0 - h), w, h]
    };
    let mut gt = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..images {
        let mut t = DetectionTargets::empty(256, 256);
        for _ in 0..8 {
            t.boxes.push(bx(rng));
            t.labels.push(rng.random_range(0..3));
        }
        let d = (0..50)
            .map(|_| Detection { bbox: bx(rng), class: rng.random_range(0..3), score: rng.random_range(0.0..1.0) })
            .collect();
        gt.push(t);
        dets.push(d);
    }
    (gt, dets)
}

fn ap(c: &mut Criterion) {
    let (gt, dets) = scene(&mut ChaCha8Rng::seed_from_u64(4), 100);
    c.bench_function("coco metrics 100 images", |b| {
        b.iter_batched(|| dets.clone(), |d| coco_metrics(&gt, &d, 3), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, generator, extractor, resampling, ap
}
criterion_main!(benches);
