use criterion::{black_box, criterion_group, criterion_main, Criterion};
use specfield::dataset::{oracle_ray, AnalyticScene};
use specfield::fusion::saunet_forward;
use specfield::metrics::ssim;
use specfield::nn::{Graph, Tensor};
use specfield::render::{compositing_weights, hierarchical_resample, normalize, quadrature, stratified_samples_seeded, Ray};
use specfield::{BandPartition, RgbImage};
use specfield_bench::{desk_field, hash_values, sample_points, saunet, stack};

fn dense(c: &mut Criterion) {
    let n = 4096;
    let x = Tensor::new(vec![n, 32], hash_values(n * 32, 2)).unwrap();
    let w = Tensor::new(vec![32, 32], hash_values(32 * 32, 3)).unwrap();
    c.bench_function("dense 4096x32x32 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.input(w.clone());
            let bv = g.input(Tensor::zeros(&[32]));
            let y = g.dense(xv, wv, bv).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv).is_some())
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = Tensor::new(vec![1, 16, 32, 32], hash_values(16 * 32 * 32, 4)).unwrap();
    let k = Tensor::new(vec![16, 16, 3, 3], hash_values(16 * 16 * 9, 5)).unwrap();
    c.bench_function("conv2d 16ch 32x32 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.input(k.clone());
            let bv = g.input(Tensor::zeros(&[16]));
            let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(kv).is_some())
        })
    });
}

fn field(c: &mut Criterion) {
    let f = desk_field(4);
    let (pts, dirs) = sample_points(128 * 48);
    c.bench_function("field 6144 samples fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = f.store().bind(&mut g);
            let o = f.forward(&mut g, &p, &pts, &dirs, None).unwrap();
            let s = g.sum(o.radiance);
            g.backward(s).unwrap();
        })
    });
}

fn sampling(c: &mut Criterion) {
    let ts = stratified_samples_seeded(2.0, 6.0, 64, Some(7)).unwrap();
    let sig: Vec<f64> = hash_values(64, 8).iter().map(|v| 5.0 * v).collect();
    let rad = hash_values(64 * 11, 9);
    c.bench_function("quadrature 64 samples 11 bands", |b| {
        b.iter(|| quadrature(black_box(&sig), black_box(&rad), &ts, false).unwrap())
    });
    let w = compositing_weights(&sig, &ts.deltas());
    c.bench_function("hierarchical resample 64+128", |b| {
        b.iter(|| hierarchical_resample::<rand_chacha::ChaCha8Rng>(&ts, black_box(&w), 128, None).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    let scene = AnalyticScene::three_blobs();
    let partition = BandPartition::uniform(11, 380.0, 780.0).unwrap();
    let em = scene.emissions(&partition);
    let ray = Ray { origin: [4.0, 0.1, 0.2], dir: normalize([-1.0, 0.0, -0.05]) };
    c.bench_function("oracle ray 4096 samples", |b| {
        b.iter(|| oracle_ray(&scene, black_box(&ray), 2.5, 5.5, &em, 11, 4096))
    });
}

fn fusion(c: &mut Criterion) {
    let net = saunet(11);
    let s = stack(32, 11);
    c.bench_function("saunet forward 32x32 s11", |b| b.iter(|| saunet_forward(black_box(&s), &net).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = RgbImage::from_data(64, 64, hash_values(64 * 64 * 3, 10)).unwrap();
    let b2 = RgbImage::from_data(64, 64, hash_values(64 * 64 * 3, 11)).unwrap();
    c.bench_function("ssim 64x64", |b| {
        b.iter(|| ssim(black_box(&a), black_box(&b2)).unwrap())
    });
}

criterion_group!(benches, dense, conv, field, sampling, oracle, fusion, metrics);
criterion_main!(benches);
