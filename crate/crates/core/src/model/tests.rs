use super::*;
use crate::autodiff::AdamConfig;
use crate::operators::{
    bernoulli_mask, cartesian_mask, make_blur, make_downsampling, make_gaussian_kernel, make_identity, make_inpainting,
    make_mri, random_compressed_sensing, DownsampleFilter,
};
use crate::solvers::lambda_schedule;
use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn toy_config() -> RamConfig {
    RamConfig {
        num_scales: 2,
        base_width: 4,
        blocks_per_scale: 1,
        krylov_order: 2,
        seed: 11,
        ..RamConfig::default()
    }
}

/// Untrained models predict a zero correction; give every head a random
/// output convolution so the trunk actually matters.
fn randomize_outputs(model: &mut RamModel, seed: u64) {
    for (i, &c) in model.config().heads.clone().iter().enumerate() {
        let name = format!("head{c}.out");
        let shape = model.params().value(&name).unwrap().shape().to_vec();
        let w = randn(shape, seed + i as u64).scale(0.2);
        model.params_mut().set_value(&name, w).unwrap();
    }
}

fn measure(op: &OperatorHandle, seed: u64) -> Tensor {
    let x = randn(op.domain_shape(), seed).map(|v| 0.5 + 0.2 * v);
    op.apply(&x).unwrap()
}

#[test]
fn no_bias_parameters() {
    let model = RamModel::new(RamConfig::default()).unwrap();
    assert!(model.params().names().all(|n| !n.contains("bias")));
    for p in model.params().iter() {
        assert!(p.value.shape().len() == 4 || p.name == "eta", "{}", p.name);
    }
}

#[test]
fn config_validation() {
    for bad in [
        RamConfig { num_scales: 0, ..toy_config() },
        RamConfig { base_width: 2, ..toy_config() },
        RamConfig { ksm_kernel: 5, ..toy_config() },
        RamConfig { heads: vec![4], ..toy_config() },
        RamConfig { heads: vec![1, 1], ..toy_config() },
    ] {
        assert!(RamModel::new(bad).is_err());
    }
    let json = serde_json::to_string(&toy_config()).unwrap();
    assert_eq!(serde_json::from_str::<RamConfig>(&json).unwrap(), toy_config());
}

#[test]
fn zero_output_head_returns_prox_estimate() {
    let model = RamModel::new(toy_config()).unwrap();
    let mask = bernoulli_mask(&[1, 16, 16], 0.6, false, 3).unwrap();
    let op = make_inpainting(&mask).unwrap();
    let y = measure(&op, 1);
    let noise = NoiseParams::gaussian(0.1).unwrap();
    let out = model.forward(&y, &op, noise).unwrap();

    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let aty = tape.linear(yv, &op, true).unwrap();
    let lambda = tape.constant(Tensor::scalar(lambda_schedule(0.1, 1.0, y.data())));
    let x0 = prox_on_tape(&mut tape, &op, aty, lambda, NET_CG_ITERS, NET_CG_TOL).unwrap();
    assert_eq!(out.data(), tape.value(x0).data());

    // inpainting prox in closed form: (1+λ) m y / (λ m + 1)
    let lam = lambda_schedule(0.1, 1.0, y.data());
    for ((&o, &m), &yy) in out.data().iter().zip(mask.data()).zip(y.data()) {
        assert!((o - (1.0 + lam) * m * yy / (lam * m + 1.0)).abs() < 1e-8);
    }
}

#[test]
fn noiseless_input_is_backprojection() {
    let model = RamModel::new(toy_config()).unwrap();
    let op = random_compressed_sensing(&[1, 8, 8], 4, 2).unwrap();
    let y = measure(&op, 2);
    let out = model.forward(&y, &op, NoiseParams::default()).unwrap();
    assert_eq!(out, op.adjoint(&y).unwrap());
}

#[test]
fn output_shapes_follow_domain() {
    let mut model = RamModel::new(RamConfig {
        num_scales: 3,
        ..toy_config()
    })
    .unwrap();
    randomize_outputs(&mut model, 5);
    let sr = make_downsampling(4, DownsampleFilter::Bicubic, &[3, 96, 96]).unwrap().normalized();
    let y = measure(&sr, 3);
    assert_eq!(y.shape(), &[3, 24, 24]);
    let out = model.forward(&y, &sr, NoiseParams::gaussian(0.01).unwrap()).unwrap();
    assert_eq!(out.shape(), &[3, 96, 96]);

    let mask = cartesian_mask(8, 64, 64, 1).unwrap();
    let mri = make_mri(&mask, &[2, 64, 64]).unwrap();
    let y = measure(&mri, 4);
    let out = model.forward(&y, &mri, NoiseParams::gaussian(0.01).unwrap()).unwrap();
    assert_eq!(out.shape(), &[2, 64, 64]);

    // odd extents go through reflect padding and come back cropped
    let op = make_identity(&[1, 13, 11]).unwrap();
    let y = measure(&op, 5);
    let out = model.forward(&y, &op, NoiseParams::gaussian(0.05).unwrap()).unwrap();
    assert_eq!(out.shape(), &[1, 13, 11]);
}

#[test]
fn rejects_unsupported_channels_and_bad_measurements() {
    let model = RamModel::new(RamConfig {
        heads: vec![1, 3],
        ..toy_config()
    })
    .unwrap();
    let op2 = make_identity(&[2, 8, 8]).unwrap();
    assert!(matches!(
        model.forward(&Tensor::zeros(vec![2, 8, 8]), &op2, NoiseParams::default()),
        Err(Error::UnsupportedChannels(2))
    ));
    let op4 = make_identity(&[4, 8, 8]).unwrap();
    assert!(model.forward(&Tensor::zeros(vec![4, 8, 8]), &op4, NoiseParams::default()).is_err());
    let op1 = make_identity(&[1, 8, 8]).unwrap();
    assert!(model.forward(&Tensor::zeros(vec![1, 8, 7]), &op1, NoiseParams::default()).is_err());
    assert!(model.select_head(2).is_err());
}

#[test]
fn scale_equivariance_across_operators() {
    let mut model = RamModel::new(toy_config()).unwrap();
    randomize_outputs(&mut model, 7);
    let kernel = make_gaussian_kernel(1.5, 5).unwrap();
    let ops = vec![
        make_blur(&kernel, &[3, 16, 16]).unwrap().normalized(),
        make_inpainting(&bernoulli_mask(&[1, 16, 16], 0.5, false, 1).unwrap()).unwrap(),
        make_mri(&cartesian_mask(4, 16, 16, 2).unwrap(), &[2, 16, 16]).unwrap(),
        random_compressed_sensing(&[1, 16, 16], 4, 3).unwrap(),
    ];
    for (i, op) in ops.iter().enumerate() {
        let y = measure(op, 10 + i as u64);
        let noise = NoiseParams::new(0.05, 0.02).unwrap();
        let base = model.forward(&y, op, noise).unwrap();
        for alpha in [0.5, 2.0, 10.0] {
            let scaled_noise = NoiseParams::new(alpha * 0.05, alpha * 0.02).unwrap();
            let out = model.forward(&y.scale(alpha), op, scaled_noise).unwrap();
            let want = base.scale(alpha);
            let err = out.sub(&want).unwrap().norm2() / want.norm2();
            assert!(err < 1e-8, "{} alpha {alpha}: {err}", op.kind());
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut model = RamModel::new(toy_config()).unwrap();
    randomize_outputs(&mut model, 1);
    let op = make_identity(&[3, 16, 16]).unwrap();
    let y = measure(&op, 8);
    let n = NoiseParams::gaussian(0.1).unwrap();
    assert_eq!(model.forward(&y, &op, n).unwrap(), model.forward(&y, &op, n).unwrap());
}

#[test]
fn heads_share_the_trunk() {
    let mut model = RamModel::new(toy_config()).unwrap();
    randomize_outputs(&mut model, 2);
    let shared = model.shared_names();
    let trunk_sum = model.params().checksum(shared.iter().map(String::as_str)).unwrap();
    assert!(shared.iter().any(|n| n.starts_with("trunk.")));
    for c in [1, 3] {
        let head = model.select_head(c).unwrap();
        assert_eq!(head.channels(), c);
    }
    assert_eq!(model.params().checksum(shared.iter().map(String::as_str)).unwrap(), trunk_sum);

    // both heads bind the same trunk names on their tapes
    let mut names = Vec::new();
    for c in [1, 3] {
        let op = make_identity(&[c, 8, 8]).unwrap();
        let mut tape = Tape::new();
        let y = tape.constant(measure(&op, 3));
        let pyr = model.pyramid(&op).unwrap();
        model
            .forward_tape(&mut tape, y, &op, NoiseParams::gaussian(0.1).unwrap(), &pyr)
            .unwrap();
        let mut bound: Vec<String> = tape
            .bindings()
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !n.starts_with("head"))
            .collect();
        bound.sort();
        names.push(bound);
    }
    assert_eq!(names[0], names[1]);

    // a step through the colour head leaves the grayscale head untouched
    let gray = model.head_names(1);
    let gray_sum = model.params().checksum(gray.iter().map(String::as_str)).unwrap();
    let op = make_identity(&[3, 8, 8]).unwrap();
    let y = measure(&op, 4);
    let pyr = model.pyramid(&op).unwrap();
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let out = model
        .forward_tape(&mut tape, yv, &op, NoiseParams::gaussian(0.1).unwrap(), &pyr)
        .unwrap();
    let target = tape.constant(y.scale(0.9));
    let d = tape.sub(out, target).unwrap();
    let loss = tape.sum_squares(d);
    let grads = tape.backward(loss).unwrap();
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&tape, &grads).unwrap();
    for n in &gray {
        assert!(model.params().get(n).unwrap().grad.is_none(), "{n}");
    }
    model.params_mut().adam_step(&AdamConfig::default()).unwrap();
    assert_eq!(model.params().checksum(gray.iter().map(String::as_str)).unwrap(), gray_sum);
    assert_ne!(model.params().checksum(shared.iter().map(String::as_str)).unwrap(), trunk_sum);
}

fn tiny_gradcheck_setup() -> (RamModel, OperatorHandle, Tensor, Tensor, NoiseParams) {
    let cfg = RamConfig {
        num_scales: 1,
        base_width: 4,
        blocks_per_scale: 1,
        krylov_order: 2,
        heads: vec![1],
        cg_tol: 0.0,
        seed: 3,
        ..RamConfig::default()
    };
    let mut model = RamModel::new(cfg).unwrap();
    randomize_outputs(&mut model, 9);
    let kernel = make_gaussian_kernel(1.0, 3).unwrap();
    let op = make_blur(&kernel, &[1, 8, 8]).unwrap().normalized();
    let y = measure(&op, 6);
    let target = randn(vec![1, 8, 8], 7).map(|v| 0.5 + 0.1 * v);
    (model, op, y, target, NoiseParams::new(0.1, 0.05).unwrap())
}

fn tiny_loss(model: &RamModel, op: &OperatorHandle, y: &Tensor, target: &Tensor, noise: NoiseParams) -> f64 {
    let out = model.forward(y, op, noise).unwrap();
    out.sub(target).unwrap().data().iter().map(|v| v * v).sum()
}

#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    let (mut model, op, y, target, noise) = tiny_gradcheck_setup();
    let pyr = model.pyramid(&op).unwrap();
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let out = model.forward_tape(&mut tape, yv, &op, noise, &pyr).unwrap();
    let t = tape.constant(target.clone());
    let d = tape.sub(out, t).unwrap();
    let loss = tape.sum_squares(d);
    let grads = tape.backward(loss).unwrap();
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&tape, &grads).unwrap();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let base = model.clone();

    for trial in 0..3u64 {
        let dirs: Vec<Tensor> = names
            .iter()
            .enumerate()
            .map(|(i, n)| randn(base.params().value(n).unwrap().shape().to_vec(), 100 * trial + i as u64))
            .collect();
        let analytic: f64 = names
            .iter()
            .zip(&dirs)
            .map(|(n, d)| {
                let p = base.params().get(n).unwrap();
                p.grad.as_ref().map_or(0.0, |g| g.dot(d).unwrap())
            })
            .sum();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut m = base.clone();
            for (n, d) in names.iter().zip(&dirs) {
                let mut v = m.params().value(n).unwrap().clone();
                v.axpy(sign * h, d).unwrap();
                m.params_mut().set_value(n, v).unwrap();
            }
            tiny_loss(&m, &op, &y, &target, noise)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        assert!(rel < 1e-4, "trial {trial}: {analytic} vs {fd} ({rel})");
    }
}

#[test]
fn end_to_end_measurement_gradient_matches_finite_differences() {
    use crate::autodiff::gradcheck::gradient_error;
    let (model, op, y, target, noise) = tiny_gradcheck_setup();
    let pyr = model.pyramid(&op).unwrap();
    let err = gradient_error(
        |tape, v| {
            let out = model.forward_tape(tape, v[0], &op, noise, &pyr)?;
            let t = tape.constant(target.clone());
            let d = tape.sub(out, t)?;
            Ok(tape.sum_squares(d))
        },
        &[y],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn span_residual(target: &[f64], basis: &[Vec<f64>]) -> f64 {
    let m = DMatrix::from_fn(target.len(), basis.len(), |r, c| basis[c][r]);
    let t = DVector::from_column_slice(target);
    let coef = m.clone().svd(true, true).solve(&t, 1e-14).unwrap();
    (m * coef - &t).norm() / t.norm()
}

#[test]
fn one_by_one_combination_stays_in_krylov_span() {
    for (c, k) in [(1usize, 3usize), (3, 2), (1, 0)] {
        let cfg = RamConfig {
            ksm_kernel: 1,
            krylov_order: k,
            heads: vec![c],
            ..toy_config()
        };
        let model = RamModel::new(cfg).unwrap();
        let kernel = make_gaussian_kernel(1.2, 5).unwrap();
        let op = make_blur(&kernel, &[c, 16, 16]).unwrap().normalized();
        let y = measure(&op, 20);
        let pyr = model.pyramid(&op).unwrap();
        let level = pyr.level(1);
        let x_s = randn(level.domain_shape(), 21);
        let head = model.select_head(c).unwrap();
        let out = head.ksm_combine("enc1", &x_s, level, &y).unwrap();
        let stack = build_ksm_stack(&x_s, level, &y, k).unwrap().stacked().unwrap();
        let plane = 8 * 8;
        let basis: Vec<Vec<f64>> = stack.data().chunks(plane).map(<[f64]>::to_vec).collect();
        assert_eq!(basis.len(), 2 * (k + 1) * c);
        for ch in 0..c {
            let r = span_residual(&out.data()[ch * plane..(ch + 1) * plane], &basis);
            assert!(r < 1e-8, "C={c} K={k} channel {ch}: {r}");
        }
        if k == 0 {
            // two-term span with the learned scalars as coefficients
            let w = model.params().value("head1.ksm.enc1.combine").unwrap().data().to_vec();
            for (i, &o) in out.data().iter().enumerate() {
                let want = w[0] * basis[0][i] + w[1] * basis[1][i];
                assert!((o - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unit_combination_is_identity_on_features() {
    let cfg = RamConfig {
        ksm_kernel: 1,
        heads: vec![1],
        ..toy_config()
    };
    let mut model = RamModel::new(cfg).unwrap();
    let k = model.config().krylov_order;
    let mut w = Tensor::zeros(vec![1, 2 * (k + 1), 1, 1]);
    w.data_mut()[0] = 1.0;
    model.params_mut().set_value("head1.ksm.enc0.combine", w).unwrap();
    let op = make_identity(&[1, 8, 8]).unwrap();
    let pyr = model.pyramid(&op).unwrap();
    let x = randn(vec![1, 8, 8], 4);
    let out = model
        .select_head(1)
        .unwrap()
        .ksm_combine("enc0", &x, pyr.level(0), &measure(&op, 1))
        .unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn noise_map_layout() {
    let m = noise_maps(0.1, 0.0, 3, 5);
    assert_eq!(m.shape(), &[2, 3, 5]);
    assert!(m.data()[..15].iter().all(|&v| v == 0.1));
    assert!(m.data()[15..].iter().all(|&v| v == 0.0));
    let m2 = noise_maps(0.2, 0.4, 3, 5);
    assert_eq!(m2, noise_maps(0.1, 0.2, 3, 5).scale(2.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = RamModel::new(RamConfig {
        seed: u64::MAX - 5,
        ..toy_config()
    })
    .unwrap();
    randomize_outputs(&mut model, 3);
    let path = dir.path().join("m.tnsr");
    model.save(&path).unwrap();
    let back = RamModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let op = make_identity(&[2, 16, 16]).unwrap();
    let y = measure(&op, 2);
    let n = NoiseParams::gaussian(0.05).unwrap();
    assert_eq!(back.forward(&y, &op, n).unwrap(), model.forward(&y, &op, n).unwrap());

    let mut f = model.to_tnsr(DType::F64);
    f.insert("stray", Tensor::scalar(1.0), DType::F64);
    assert!(RamModel::from_tnsr(&f).is_err());
    let mut f = model.to_tnsr(DType::F64);
    f.insert("eta", Tensor::zeros(vec![2]), DType::F64);
    assert!(RamModel::from_tnsr(&f).is_err());
}

#[test]
fn padded_grid_uses_generic_coarse_operators() {
    // 14x14 pads to 16x16 with two scales, so the fast path does not apply
    let model = RamModel::new(toy_config()).unwrap();
    let op = make_inpainting(&bernoulli_mask(&[1, 14, 14], 0.7, false, 2).unwrap()).unwrap();
    let pyr = model.pyramid(&op).unwrap();
    assert_eq!(pyr.grid(), &[1, 16, 16]);
    assert_eq!(pyr.level(1).domain_shape(), vec![1, 8, 8]);
    assert_eq!(pyr.level(1).path(), crate::operators::CoarsePath::Generic);
    assert!((pyr.level(1).op().norm() - 1.0).abs() < 1e-6);
}
