//! Microbenchmarks of the differentiable kernels that dominate training.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use divreg_bench::filled;
use divreg_core::kldivnet::{dv_similarity_seeded, KldivNetConfig, KldivNetParams};
use divreg_core::similarity::{lncc, mi_pwde, MiOptions};
use divreg_core::{Tape, Tensor};

fn conv(c: &mut Criterion) {
    let x: Tensor<f32> = filled(&[2, 16, 32, 32]);
    let w: Tensor<f32> = filled(&[32, 16, 3, 3]);
    let b: Tensor<f32> = filled(&[32]);

    c.bench_function("conv3x3_forward_2x16x32x32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = tape
                .input(black_box(x.clone()))
                .conv(tape.input(w.clone()), tape.input(b.clone()), 1);
            black_box(y.value())
        })
    });

    c.bench_function("conv3x3_train_2x16x32x32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let xv = tape.input(black_box(x.clone()));
            let y = xv.conv(tape.input(w.clone()), tape.input(b.clone()), 1);
            let grads = tape.backward(y.reduce_mean());
            black_box(grads.get_or_zeros(xv))
        })
    });
}

fn warp(c: &mut Criterion) {
    let img: Tensor<f32> = filled(&[2, 1, 64, 64]);
    let flow: Tensor<f32> = filled(&[2, 2, 64, 64]);

    c.bench_function("warp_train_2x1x64x64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let fv = tape.input(black_box(flow.clone()));
            let moved = tape.input(img.clone()).warp(fv);
            let grads = tape.backward(moved.reduce_mean());
            black_box(grads.get_or_zeros(fv))
        })
    });
}

fn similarities(c: &mut Criterion) {
    let a: Tensor<f32> = filled(&[2, 1, 64, 64]);
    let b: Tensor<f32> = filled(&[2, 1, 64, 64]);

    c.bench_function("lncc9_train_2x1x64x64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let av = tape.input(black_box(a.clone()));
            let s = lncc(av, tape.input(b.clone()), 9).unwrap();
            black_box(tape.backward(s).get_or_zeros(av))
        })
    });

    let mi_opts = MiOptions::default();
    c.bench_function("mi_train_2x1x64x64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let av = tape.input(black_box(a.clone()));
            let s = mi_pwde(av, tape.input(b.clone()), &mi_opts).unwrap();
            black_box(tape.backward(s).get_or_zeros(av))
        })
    });

    let params = KldivNetParams::<f32>::init(&KldivNetConfig::default(), 7);
    c.bench_function("dv_score_train_2x1x64x64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let av = tape.input(black_box(a.clone()));
            let s = dv_similarity_seeded(&vars, av, tape.input(b.clone()), 5).unwrap();
            black_box(tape.backward(s).get_or_zeros(av))
        })
    });
}

criterion_group!(kernels, conv, warp, similarities);
criterion_main!(kernels);
