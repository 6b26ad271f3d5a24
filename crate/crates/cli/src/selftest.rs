//! Invariant suite: adjoint identities, gradient checks, the proximal
//! estimate against its closed form, and scale equivariance.

use reconkit::autodiff::gradcheck::gradient_error;
use reconkit::autodiff::PaddingMode;
use reconkit::model::{RamConfig, RamModel};
use reconkit::noise::NoiseParams;
use reconkit::operators::{
    adjoint_mismatch, bernoulli_mask, cartesian_mask, gaussian_sensitivity_maps, make_blur, make_ct_radon,
    make_demosaic, make_downsampling, make_gaussian_kernel, make_inpainting, make_mri, make_multicoil_mri,
    random_compressed_sensing, DownsampleFilter, OperatorHandle,
};
use reconkit::solvers::{lambda_schedule, prox_estimate, NET_CG_ITERS, NET_CG_TOL};
use reconkit::{Result, Tensor};

use crate::{CliResult, Failure};

struct Check {
    name: String,
    value: f64,
    limit: f64,
}

fn probe(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.618 + phase).sin()).collect()
}

fn operators() -> Result<Vec<(&'static str, OperatorHandle)>> {
    let gray = [1usize, 16, 16];
    Ok(vec![
        ("blur", make_blur(&make_gaussian_kernel(1.0, 5)?, &gray)?),
        ("inpainting", make_inpainting(&bernoulli_mask(&gray, 0.5, false, 1)?)?),
        ("mri", make_mri(&cartesian_mask(4, 16, 16, 2)?, &[2, 16, 16])?),
        (
            "multicoil_mri",
            make_multicoil_mri(&cartesian_mask(4, 16, 16, 3)?, &gaussian_sensitivity_maps(4, 16, 16)?, &[2, 16, 16])?,
        ),
        ("ct", make_ct_radon(8, &gray)?),
        ("compressed_sensing", random_compressed_sensing(&gray, 4, 4)?),
        ("downsampling", make_downsampling(2, DownsampleFilter::Bicubic, &gray)?),
        ("demosaic", make_demosaic(&[3, 16, 16])?),
    ])
}

fn checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, op) in operators()? {
        let x = probe(op.domain_len(), 0.3);
        let y = probe(op.range_len(), 1.7);
        out.push(Check {
            name: format!("adjoint {name}"),
            value: adjoint_mismatch(&op, &x, &y),
            limit: 1e-10,
        });
    }

    let x = Tensor::new(vec![1, 2, 6, 6], probe(72, 0.1))?;
    let w = Tensor::new(vec![3, 2, 3, 3], probe(54, 0.9))?;
    for (label, mode) in [("zero", PaddingMode::Zero(1)), ("reflect", PaddingMode::Reflect(1))] {
        let err = gradient_error(
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, mode)?;
                let r = t.relu(y);
                Ok(t.sum_squares(r))
            },
            &[x.clone(), w.clone()],
            1e-6,
        )?;
        out.push(Check {
            name: format!("gradient conv2d {label}"),
            value: err,
            limit: 1e-4,
        });
    }

    let model = RamModel::new(RamConfig {
        num_scales: 1,
        base_width: 4,
        blocks_per_scale: 1,
        krylov_order: 1,
        cg_tol: 0.0,
        seed: 5,
        ..RamConfig::default()
    })?;
    let mut model = model;
    model
        .params_mut()
        .set_value("head1.out", Tensor::new(vec![1, 4, 3, 3], probe(36, 2.0).iter().map(|v| 0.1 * v).collect())?)?;
    let blur = make_blur(&make_gaussian_kernel(1.0, 3)?, &[1, 8, 8])?.normalized();
    let noise = NoiseParams::gaussian(0.05)?;
    let pyr = model.pyramid(&blur)?;
    let y0 = Tensor::new(blur.range_shape(), probe(blur.range_len(), 0.4))?;
    let err = gradient_error(
        |t, v| {
            let out = model.forward_tape(t, v[0], &blur, noise, &pyr)?;
            Ok(t.sum_squares(out))
        },
        &[y0.clone()],
        1e-5,
    )?;
    out.push(Check {
        name: "gradient model input".into(),
        value: err,
        limit: 1e-4,
    });

    let mask = bernoulli_mask(&[1, 16, 16], 0.6, false, 7)?;
    let inpaint = make_inpainting(&mask)?;
    let y = Tensor::new(vec![1, 16, 16], probe(256, 0.5))?;
    let lambda = lambda_schedule(0.1, 1.0, y.data());
    let u = prox_estimate(&inpaint, &y, lambda, NET_CG_ITERS, NET_CG_TOL)?;
    let worst = u
        .data()
        .iter()
        .zip(mask.data())
        .zip(y.data())
        .map(|((&o, &m), &yy)| (o - (1.0 + lambda) * m * yy / (lambda * m + 1.0)).abs())
        .fold(0.0, f64::max);
    out.push(Check {
        name: "prox closed form".into(),
        value: worst,
        limit: 1e-8,
    });

    let base = model.forward(&y0, &blur, noise)?;
    for alpha in [0.5, 2.0, 10.0] {
        let scaled = model.forward(&y0.scale(alpha), &blur, NoiseParams::gaussian(0.05 * alpha)?)?;
        let diff = scaled.sub(&base.scale(alpha))?.max_abs() / (alpha * base.max_abs().max(1e-12));
        out.push(Check {
            name: format!("scale equivariance alpha={alpha}"),
            value: diff,
            limit: 1e-8,
        });
    }
    Ok(out)
}

pub fn run() -> CliResult {
    let results = checks()?;
    let mut failed = 0;
    for c in &results {
        let ok = c.value.is_finite() && c.value <= c.limit;
        if !ok {
            failed += 1;
        }
        println!("{} {:<32} {:.3e} (limit {:.0e})", if ok { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
    }
    if failed > 0 {
        return Err(Failure::numerical(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
