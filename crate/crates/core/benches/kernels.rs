//! Kernel timings. Run once with default features and once with
//! `--no-default-features` to compare the rayon and sequential builds; the
//! group name records which build produced the numbers.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use igahide::config::RunConfig;
use igahide::dataio::{random_message, synthetic_images};
use igahide::diff::Tape;
use igahide::nets::NetConfig;
use igahide::par;
use igahide::train::{train_step, TrainState};
use igahide::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("kernels/{}", mode()));
    let x = rand_tensor(&[8, 32, 64, 64], 1);
    let w = rand_tensor(&[32, 32, 3, 3], 2);
    let b = rand_tensor(&[32], 3);

    g.bench_function("conv2d_forward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let out = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()))
                .unwrap();
            black_box(out.value().data()[0])
        })
    });

    g.bench_function("conv2d_forward_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let wv = tape.var(w.clone());
            let out = xv.conv2d(&wv, &tape.var(b.clone())).unwrap();
            let grads = tape.backward(&out.square().mean()).unwrap();
            black_box(grads.wrt(&wv).unwrap().data()[0])
        })
    });

    let gamma = Tensor::ones(vec![32]);
    let beta = Tensor::zeros(vec![32]);
    g.bench_function("batch_norm_train", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (out, _, _) = tape
                .var(x.clone())
                .batch_norm_train(&tape.var(gamma.clone()), &tape.var(beta.clone()), 1e-5)
                .unwrap();
            black_box(out.value().data()[0])
        })
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("train_step/{}", mode()));
    g.sample_size(10);
    let config = RunConfig {
        net: NetConfig {
            height: 32,
            width: 32,
            base_width: 16,
            ..NetConfig::default()
        },
        batch_size: 8,
        ..RunConfig::default()
    };
    let covers = Tensor::stack(&synthetic_images(8, 32, 32, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let msgs: Vec<_> = (0..8)
        .map(|_| random_message(config.net.k, &mut rng).unwrap())
        .collect();
    let mut state = TrainState::new(config).unwrap();
    g.bench_function("32x32_batch8", |bench| {
        bench.iter(|| {
            black_box(
                train_step(&mut state, &covers, &msgs, &mut rng)
                    .unwrap()
                    .generator,
            )
        })
    });
    g.finish();
}

criterion_group!(benches, kernels, training);
criterion_main!(benches);
