use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use reconkit::autodiff::{PaddingMode, Tape};
use reconkit::instance::ProblemInstance;
use reconkit::model::DifferentiableReconstructor;
use reconkit::noise::NoiseParams;
use reconkit::operators::{
    cartesian_mask, make_blur, make_ct_radon, make_gaussian_kernel, make_mri, OperatorHandle,
};
use reconkit::selfsup::{finetune_objective, FinetuneConfig};
use reconkit::solvers::{lambda_schedule, prox_estimate, NET_CG_ITERS, NET_CG_TOL};
use reconkit::Tensor;
use reconkit_bench::{bench_model, test_image};

fn operators(c: &mut Criterion) {
    let x = test_image(1, 64);
    let cases: Vec<(&str, OperatorHandle, Tensor)> = vec![
        ("blur 9x9", make_blur(&make_gaussian_kernel(2.0, 9).unwrap(), &[1, 64, 64]).unwrap(), x.clone()),
        ("mri x4", make_mri(&cartesian_mask(4, 64, 64, 0).unwrap(), &[2, 64, 64]).unwrap(), test_image(2, 64)),
        ("ct 30 angles", make_ct_radon(30, &[1, 64, 64]).unwrap(), x.clone()),
    ];
    for (name, op, x) in cases {
        let y = op.apply(&x).unwrap();
        c.bench_function(&format!("apply {name} 64x64"), |b| b.iter(|| op.apply(black_box(&x)).unwrap()));
        c.bench_function(&format!("adjoint {name} 64x64"), |b| b.iter(|| op.adjoint(black_box(&y)).unwrap()));
    }
    let op = make_blur(&make_gaussian_kernel(2.0, 9).unwrap(), &[1, 64, 64]).unwrap().normalized();
    let y = op.apply(&x).unwrap();
    let lambda = lambda_schedule(0.05, 1.0, y.data());
    c.bench_function("prox estimate blur 64x64", |b| {
        b.iter(|| prox_estimate(&op, black_box(&y), lambda, NET_CG_ITERS, NET_CG_TOL).unwrap())
    });
}

fn convolution(c: &mut Criterion) {
    let x = Tensor::from_fn(vec![1, 16, 64, 64], |i| (i as f64 * 0.1).sin());
    let w = Tensor::from_fn(vec![16, 16, 3, 3], |i| (i as f64 * 0.3).cos() * 0.1);
    c.bench_function("conv2d 16->16 64x64 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.variable(w.clone());
            let y = tape.conv2d(xv, wv, 1, PaddingMode::Reflect(1)).unwrap();
            let l = tape.sum_squares(y);
            tape.backward(l).unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let model = bench_model(8, 2);
    let x = test_image(1, 64);
    let op = make_blur(&make_gaussian_kernel(2.0, 9).unwrap(), &[1, 64, 64]).unwrap().normalized();
    let inst = ProblemInstance::simulate(op, &x, NoiseParams::gaussian(0.05).unwrap(), 0).unwrap();
    c.bench_function("model forward blur 64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let y = tape.constant(inst.y.clone());
            model.forward_on_tape(&mut tape, y, &inst).unwrap()
        })
    });
    let cfg = FinetuneConfig::default();
    c.bench_function("sure+ei objective and gradient 64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let l = finetune_objective(&mut tape, &model, &inst, &[], &cfg, 0).unwrap();
            tape.backward(l).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = operators, convolution, network
}
criterion_main!(benches);
