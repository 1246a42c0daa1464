use criterion::{criterion_group, criterion_main, Criterion};
use keepcore::augment::AugmentSpec;
use keepcore::keep::keep_augment;
use keepcore::metrics::{surface_distances, Mask};
use keepcore::pipeline::SyntheticTask;
use keepcore::sage::{sage_step, SageConfig, SageState};
use keepcore::{ImportanceMap, KeepConfig, OracleNet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn oracle() -> OracleNet {
    OracleNet::preset("oracle-A", 1, 2).unwrap().frozen()
}

fn forward(c: &mut Criterion) {
    let net = oracle();
    let s = SyntheticTask::default().sample(0).unwrap();
    c.bench_function("oracle forward 64x64", |b| b.iter(|| net.forward(black_box(&s.image)).unwrap()));
    c.bench_function("oracle input gradient 64x64", |b| {
        b.iter(|| net.input_gradient(black_box(&s.image), &s.labels, 1.0, 1.0).unwrap())
    });
}

fn sage(c: &mut Criterion) {
    let net = oracle();
    let s = SyntheticTask::default().sample(0).unwrap();
    let cfg = SageConfig::default();
    c.bench_function("sage step 64x64", |b| {
        b.iter_batched(
            || SageState::for_image(&s.image, &cfg).unwrap(),
            |mut st| sage_step(&mut st, &net, &s.image, &s.labels, &cfg).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn keep(c: &mut Criterion) {
    let s = SyntheticTask::default().sample(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = Tensor::new(&[4, 4], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
    let w = ImportanceMap::new(grid, 16, "s", "o").unwrap();
    let cfg = KeepConfig {
        tau_low: 0.3,
        ..KeepConfig::default()
    };
    let aug = AugmentSpec::gaussian_noise();
    c.bench_function("keep_augment noise 64x64", |b| {
        b.iter(|| keep_augment(&s.image, &s.labels, &w, &aug, &cfg, &mut rng, None).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let disc = |cy: f64, cx: f64, r: f64| {
        Mask::new(128, 128, (0..128 * 128).map(|p| {
            let (y, x) = ((p / 128) as f64, (p % 128) as f64);
            (y - cy).powi(2) + (x - cx).powi(2) < r * r
        }).collect())
        .unwrap()
    };
    let a = disc(64.0, 64.0, 30.0);
    let b = disc(60.0 + rng.random::<f64>() * 8.0, 66.0, 28.0);
    c.bench_function("hd95/asd 128x128", |bch| {
        bch.iter(|| surface_distances(black_box(&a), black_box(&b), (1.0, 1.0)).unwrap())
    });
}

criterion_group!(benches, forward, sage, keep, metrics);
criterion_main!(benches);
