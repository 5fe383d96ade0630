//! Kernel timings. Run once as is and once with `--no-default-features`;
//! group names carry the build mode so the two reports sit side by side.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use paedid::addressing::{address_patches, AddressingParams};
use paedid::bank::{build_agg_bank, build_raw_bank};
use paedid::nn::layers::{conv3x3_forward, conv3x3_weight_len, Shape3};
use paedid::nn::{train_autoencoder, ArchSpec, Model, TrainConfig};
use paedid::ssim::{ssim_loss_grad, Dims, SsimParams};
use paedid::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(side, side, 1, (0..side * side).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect()
}

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("kernels/{MODE}"));
    g.sample_size(10);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = Shape3::new(32, 32, 8);
    let x: Vec<f32> = (0..shape.len()).map(|_| rng.gen()).collect();
    let w: Vec<f32> = (0..conv3x3_weight_len(8, 16))
        .map(|_| rng.gen_range(-0.1..0.1))
        .collect();
    let b = vec![0.0f32; 16];
    g.bench_function("conv3x3_32x32x8_to_16", |bch| {
        bch.iter(|| conv3x3_forward(black_box(&x), shape, &w, &b, 16))
    });

    let d = Dims { h: 64, w: 64, c: 1 };
    let a: Vec<f64> = (0..d.len()).map(|_| rng.gen()).collect();
    let l: Vec<f64> = (0..d.len()).map(|_| rng.gen()).collect();
    let p = SsimParams::default();
    g.bench_function("ssim_grad_64x64", |bch| {
        bch.iter(|| ssim_loss_grad(black_box(&a), &l, d, &p).unwrap())
    });

    let arch = ArchSpec::new(32, 32, 1, vec![8, 16]).unwrap();
    let train = images(16, 32, 2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    g.bench_function("train_epoch_16x32x32", |bch| {
        bch.iter(|| train_autoencoder(black_box(&train), &cfg, &arch).unwrap())
    });

    let model = Model::init(&arch, 3).unwrap();
    let raw = build_raw_bank(&model, &images(20, 32, 4)).unwrap();
    let agg = build_agg_bank(&raw, 3).unwrap();
    let query = build_agg_bank(&build_raw_bank(&model, &images(1, 32, 5)).unwrap(), 3).unwrap();
    let (p1, p2, _) = arch.latent_dims();
    let params = AddressingParams {
        k: 13,
        alpha: 0.3,
        aligned: false,
    };
    g.bench_function("knn_exhaustive_64_queries_1280_rows", |bch| {
        bch.iter(|| address_patches(black_box(query.matrix.data()), &agg, p1, p2, &params).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
