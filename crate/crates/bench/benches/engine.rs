use std::hint::black_box;

use cellcount::engine::{Dims, Tape, Tensor4};
use cellcount::model::{build_params, forward, predict, Arch, ModelSpec};
use cellcount::trainer::{batch_loss, Patch, TrainConfig};
use cellcount::targets::DensityTarget;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_vec(dims, (0..dims.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3");
    for &(cin, cout, side) in &[(3, 32, 128), (32, 64, 64), (128, 512, 16)] {
        let x = random(Dims::new(1, cin, side, side), &mut rng);
        let w = random(Dims::new(cout, cin, 3, 3), &mut rng);
        let b = random(Dims::new(1, cout, 1, 1), &mut rng);
        let id = format!("{cin}to{cout}@{side}");
        group.bench_function(BenchmarkId::new("forward", &id), |bch| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
                black_box(t.conv2d_same(xv, wv, bv).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bch| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
                let y = t.conv2d_same(xv, wv, bv).unwrap();
                let l = t.sum(y).unwrap();
                t.backward(l).unwrap();
                black_box(t.grad(wv).is_some());
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let x = random(Dims::new(1, 3, 64, 64), &mut rng).map(|v| v.abs());
    for (name, arch, aux) in [("fcrn", Arch::Fcrn, false), ("cfcrn+aux", Arch::Cfcrn, true)] {
        let store = build_params(&ModelSpec::new(arch, aux), 0).unwrap();
        group.bench_function(BenchmarkId::new("predict_64", name), |b| {
            b.iter(|| black_box(predict(&store, &x).unwrap()))
        });
        group.bench_function(BenchmarkId::new("forward_aux_64", name), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                black_box(forward(&mut t, &store, xv, aux).unwrap().density)
            })
        });
    }

    let full = random(Dims::new(1, 1, 64, 64), &mut rng).map(|v| v.abs());
    let patch = Patch {
        image: x.clone(),
        target: DensityTarget::from_full(full).unwrap(),
    };
    let cfg = TrainConfig::default();
    let mut store = build_params(&ModelSpec::new(Arch::Cfcrn, true), 0).unwrap();
    group.bench_function("train_step_64/cfcrn+aux", |b| {
        b.iter(|| black_box(batch_loss(&mut store, std::slice::from_ref(&patch), &cfg, true).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
