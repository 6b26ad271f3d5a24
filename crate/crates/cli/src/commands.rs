use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reconkit::data::DatasetSpec;
use reconkit::instance::ProblemInstance;
use reconkit::io::export_pnm;
use reconkit::metrics::{default_data_range, psnr, ssim};
use reconkit::model::{RamModel, Reconstructor};
use reconkit::noise::sample_params;
use reconkit::rng::{derive_seed, rng_from_seed};
use reconkit::selfsup::{finetune as run_finetune, FinetuneConfig, TransformGroup};
use reconkit::train::{train_with, LoadedTask, TaskSpec};
use reconkit::uq::{
    confidence_radius, equivariant_bootstrap, error_map_correlation, pixelwise_errors, replicate_radii,
};
use reconkit::Tensor;

use crate::config::{base_dir, read_image, read_json, write_image, SimulateSpec, TrainFile};
use crate::{CliResult, Failure};

pub fn simulate(task: &str, input: &Path, out: &Path, seed: u64) -> CliResult {
    let x = read_image(input)?;
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(reconkit::Error::InvalidShape(shape).into());
    }
    let task_path = Path::new(task);
    let inst = if task.ends_with(".json") {
        let spec: SimulateSpec = read_json(task_path)?;
        ProblemInstance::simulate_spec(spec.operator, base_dir(task_path), &x, spec.noise, seed)?
    } else {
        let placeholder = DatasetSpec::Directory { path: String::new() };
        let spec = TaskSpec::preset(task, shape[0], placeholder)?;
        let mut rng = rng_from_seed(seed);
        let operator = spec.operator.draw(&shape, &mut rng)?;
        let noise = sample_params(&spec.noise, &mut rng)?;
        ProblemInstance::simulate_spec(operator, Path::new(""), &x, noise, derive_seed(seed, 1))?
    };
    inst.save(out)?;
    log::info!(
        "wrote {} (sigma {:.4}, gamma {:.4})",
        out.display(),
        inst.noise.sigma,
        inst.noise.gamma
    );
    Ok(())
}

pub fn train(config: &Path, out: &Path) -> CliResult {
    let file: TrainFile = read_json(config)?;
    let base = base_dir(config);
    if file.tasks.is_empty() {
        return Err(Failure::usage("training config lists no tasks"));
    }
    let tasks = file
        .tasks
        .into_iter()
        .map(|t| LoadedTask::load(t.resolve()?, base))
        .collect::<reconkit::Result<Vec<_>>>()?;
    let mut model = RamModel::new(file.model)?;
    log::info!("training {} weights on {} tasks", model.params().num_weights(), tasks.len());
    let report = train_with(&mut model, &tasks, &file.train, |step, m| {
        log::info!("checkpoint at step {step}");
        m.save(out)
    })?;
    if let Some(log_path) = file.log {
        report.write_csv(base.join(log_path))?;
    }
    for task in &tasks {
        if let Some((p, baseline)) = report.final_psnr(&task.spec.name, 20) {
            log::info!("{}: final training psnr {p:.2} dB (A^T y {baseline:.2} dB)", task.spec.name);
        }
    }
    Ok(())
}

fn load_instances(dir: &Path) -> CliResult<Vec<ProblemInstance>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(reconkit::Error::InvalidArgument(format!("no instance manifests in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| ProblemInstance::load(p).map_err(Failure::from))
        .collect()
}

pub fn finetune(config: &Path, model_path: &Path, data: &Path, out: &Path) -> CliResult {
    let cfg: FinetuneConfig = read_json(config)?;
    let mut model = RamModel::load(model_path)?;
    let instances = load_instances(data)?;
    let report = run_finetune(&mut model, &instances, &instances, &cfg)?;
    log::info!(
        "finetuned {} steps on {} measurements; kept step {}",
        cfg.steps,
        instances.len(),
        report.selected_step
    );
    model.save(out)?;
    Ok(())
}

/// 8-bit export; 2-channel images are written as magnitude.
fn export_view(x: &Tensor, path: &Path) -> CliResult {
    let (c, h, w) = x.image_dims()?;
    let view = if c == 2 {
        let d = x.data();
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| d[i].hypot(d[h * w + i])).collect())?
    } else {
        x.clone()
    };
    export_pnm(&view, path)?;
    Ok(())
}

pub fn reconstruct(model_path: &Path, instance: &Path, out: &Path, export: Option<&Path>) -> CliResult {
    let model = RamModel::load(model_path)?;
    let inst = ProblemInstance::load(instance)?;
    let xhat = model.reconstruct(&inst.y, &inst)?;
    write_image(&xhat, out)?;
    if let Some(p) = export {
        export_view(&xhat, p)?;
    }
    if let Ok(x) = inst.truth() {
        log::info!("psnr against stored ground truth: {:.2} dB", psnr(&xhat, x, default_data_range(x))?);
    }
    Ok(())
}

pub fn eval(pred: &Path, reference: &Path, metrics: &[String], data_range: Option<f64>) -> CliResult {
    let p = read_image(pred)?;
    let r = read_image(reference)?;
    let range = data_range.unwrap_or_else(|| default_data_range(&r));
    let mut header = Vec::new();
    let mut values = Vec::new();
    for m in metrics {
        let v = match m.trim() {
            "psnr" => psnr(&p, &r, range)?,
            "ssim" => ssim(&p, &r, range)?,
            other => return Err(Failure::usage(format!("unknown metric {other:?} (expected psnr or ssim)"))),
        };
        header.push(m.trim().to_string());
        values.push(format!("{v:.6}"));
    }
    println!("{}", header.join(","));
    println!("{}", values.join(","));
    Ok(())
}

pub fn uq(model_path: &Path, instance: &Path, samples: usize, out: &Path, group: Option<&str>, seed: u64) -> CliResult {
    if samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let group: TransformGroup = match group {
        Some(text) => serde_json::from_str(text).map_err(|e| Failure::usage(format!("bad --group: {e}")))?,
        None => TransformGroup::Composite { max_fraction: 0.1 },
    };
    let model = RamModel::load(model_path)?;
    let inst = ProblemInstance::load(instance)?;
    let sample = equivariant_bootstrap(&model, &inst, &group, samples, seed)?;
    let map = pixelwise_errors(&sample)?;
    write_image(&map, out)?;
    let peak = map.max_abs();
    let heat = if peak > 0.0 { map.scale(1.0 / peak) } else { map.clone() };
    export_pnm(&heat, out.with_extension("pgm"))?;
    let mut summary = format!("mean_error,max_error\n{:.6e},{peak:.6e}\n", map.mean());
    if let Ok(x) = inst.truth() {
        let dist = x.sub(&sample.xhat)?.norm2();
        let radii = replicate_radii(&sample)?;
        let mut csv = String::from("nominal,inside,radius,distance\n");
        for k in 1..20 {
            let alpha = k as f64 / 20.0;
            let r = confidence_radius(&radii, alpha)?;
            writeln!(csv, "{alpha:.2},{},{r:.6e},{dist:.6e}", u8::from(dist <= r)).expect("string write");
        }
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("uq");
        std::fs::write(out.with_file_name(format!("{stem}_coverage.csv")), csv)?;
        let corr = error_map_correlation(&map, &sample.xhat, x)?;
        summary = format!("mean_error,max_error,correlation\n{:.6e},{peak:.6e},{corr:.4}\n", map.mean());
    }
    print!("{summary}");
    Ok(())
}
