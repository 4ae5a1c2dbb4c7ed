use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crlb_core::bounds::{bound_linear_any, bound_two_layer};
use crlb_core::experiments::generate_teacher;
use crlb_core::fisher::fisher_matrix_mc;
use crlb_core::mp_law::mp_integrate;
use crlb_core::rmt_verify::{check_ar_decomposition, Estimator};
use crlb_core::stieltjes::{solve_complex, solve_fixed_point};
use crlb_core::{constants, Activation, MPLaw, ModelConfig};
use num_complex::Complex64;

fn quadrature(c: &mut Criterion) {
    c.bench_function("constants/tanh", |b| b.iter(|| constants(Activation::Tanh, black_box(1.0)).unwrap()));
    let mut g = c.benchmark_group("mp_integrate");
    for gamma in [0.5, 2.0] {
        let law = MPLaw::new(gamma).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(gamma), &law, |b, law| {
            b.iter(|| mp_integrate(law, |s| 1.0 / (s + 0.1)).unwrap())
        });
    }
    g.finish();
}

fn stieltjes(c: &mut Criterion) {
    let k = constants(Activation::Tanh, 1.0).unwrap();
    c.bench_function("stieltjes/real", |b| b.iter(|| solve_fixed_point(&k, 1.0, black_box(2.0), 0.3).unwrap()));
    let xi = Complex64::new(0.0, 0.3);
    c.bench_function("stieltjes/complex", |b| b.iter(|| solve_complex(&k, 1.0, black_box(2.0), xi, 0.0, 0.0).unwrap()));
}

fn bounds(c: &mut Criterion) {
    let cfg = ModelConfig::new(100, 100, 200, 1.0, 0.1, 1.0, 1.0).unwrap();
    c.bench_function("bound/linear_any", |b| b.iter(|| bound_linear_any(black_box(&cfg)).unwrap()));
    c.bench_function("bound/two_layer_tanh", |b| b.iter(|| bound_two_layer(black_box(&cfg), Activation::Tanh).unwrap()));
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("mc");
    g.sample_size(10);
    let cfg = ModelConfig::new(16, 16, 16, 1.0, 0.1, 1.0, 1.0).unwrap();
    let params = generate_teacher(&cfg, 1).unwrap();
    g.bench_function("fisher_16x16_5000", |b| {
        b.iter(|| fisher_matrix_mc(&params, Activation::Tanh, &cfg, 5000, 7).unwrap())
    });
    g.bench_function("ar_exact_12", |b| {
        let c12 = ModelConfig::new(12, 12, 12, 1.0, 0.1, 1.0, 1.0).unwrap();
        b.iter(|| check_ar_decomposition(&c12, Activation::Tanh, Estimator::Exact, 3).unwrap())
    });
    g.finish();
}

criterion_group!(benches, quadrature, stieltjes, bounds, monte_carlo);
criterion_main!(benches);
