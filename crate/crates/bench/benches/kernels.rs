use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2a_core::autodiff::{ops, ConvGeom, Tensor, Var};
use s2a_core::datapipe::synth_scene;
use s2a_core::evaluation::ssim;
use s2a_core::model::{spatial_attention, AttentionVariant, Conditioning, Discriminator, Generator, NetConfig};
use s2a_core::synthesis::{plan_tiles, synthesize_scene, FeatherWeights, S2aTiles};

fn wave(shape: [usize; 4]) -> Tensor<f32> {
    Tensor::from_fn(shape, |[n, c, h, w]| ((n * 7 + c * 5 + h * 3 + w) as f32 * 0.37).sin())
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    for ch in [8, 32] {
        let x = Var::constant(wave([4, ch, 64, 64]));
        let w = Var::constant(wave([ch, ch, 3, 3]));
        g.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| ops::conv2d(&x, &w, ConvGeom::same(3, 1)))
        });
    }
    g.finish();
}

fn networks(c: &mut Criterion) {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let generator: Generator<f32> = Generator::new(&net, Conditioning::Concat, &mut rng).unwrap();
    let critic: Discriminator<f32> = Discriminator::new(&net, &mut rng).unwrap();
    let z = Var::constant(wave([4, 3, 64, 64]));
    let y = Var::constant(wave([4, 1, 64, 64]));
    let a = spatial_attention(AttentionVariant::V3, &critic.forward(&y).unwrap().taps).unwrap();
    c.bench_function("generator_forward", |b| b.iter(|| generator.forward(&z, &a).unwrap()));
    c.bench_function("critic_forward", |b| b.iter(|| critic.forward(&y).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let s = synth_scene(0, 256, 256, 4).unwrap();
    let (gt, pred) = (s.target.plane(0), s.source.band("NIR").unwrap());
    c.bench_function("ssim_256", |b| b.iter(|| ssim(pred, gt, 256, 256, 1.0).unwrap()));
}

fn mosaic(c: &mut Criterion) {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let generator: Generator<f32> = Generator::new(&net, Conditioning::Concat, &mut rng).unwrap();
    let critic: Discriminator<f32> = Discriminator::new(&net, &mut rng).unwrap();
    let tiles = S2aTiles {
        generator: &generator,
        critic: &critic,
        variant: AttentionVariant::V3,
    };
    let s = synth_scene(2, 128, 128, 4).unwrap();
    let plan = plan_tiles(128, 128, 64, 16).unwrap();
    let feather = FeatherWeights::for_patch(64).unwrap();
    let attention = s.target.plane(0).to_vec();
    let mut g = c.benchmark_group("mosaic");
    g.sample_size(10);
    g.bench_function("tiny_128", |b| {
        b.iter(|| synthesize_scene(&tiles, &s.source, &attention, &plan, &feather, 8).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, networks, metrics, mosaic);
criterion_main!(benches);
