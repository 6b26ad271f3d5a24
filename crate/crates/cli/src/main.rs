mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 1 usage, 2 data or shape, 3 numerical failure.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<reconkit::Error> for Failure {
    fn from(e: reconkit::Error) -> Self {
        let code = match e {
            reconkit::Error::NonFinite(_) | reconkit::Error::Diverged { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        reconkit::Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        reconkit::Error::from(e).into()
    }
}

pub type CliResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "reconkit", version, about = "Reconstruction toolkit for linear imaging inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a measurement of an image under a task's operator and noise.
    Simulate {
        /// Task preset name or operator spec JSON file.
        #[arg(long)]
        task: String,
        /// Ground-truth image (.tnsr, .pgm or .ppm).
        #[arg(long = "in")]
        input: PathBuf,
        /// Instance manifest to write; tensors go to a sibling .tnsr file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supervised multi-task training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised finetuning on measurements.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Directory of instance manifests (*.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an instance with a trained model.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an 8-bit image (magnitude for 2-channel outputs).
        #[arg(long)]
        export_pgm: Option<PathBuf>,
    },
    /// Compare a prediction with a reference; prints CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
        metrics: Vec<String>,
        /// Peak value; defaults to 1, or the peak magnitude for 2-channel images.
        #[arg(long)]
        data_range: Option<f64>,
    },
    /// Equivariant bootstrap error map.
    Uq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Transform group as JSON, e.g. '{"kind":"shifts","max_fraction":0.1}'.
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the invariant suite.
    Selftest,
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("RECONKIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::usage(format!("RECONKIT_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Failure::usage("RECONKIT_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Simulate { task, input, out, seed } => commands::simulate(&task, &input, &out, seed),
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Finetune {
            config,
            model,
            data,
            out,
        } => commands::finetune(&config, &model, &data, &out),
        Command::Reconstruct {
            model,
            instance,
            out,
            export_pgm,
        } => commands::reconstruct(&model, &instance, &out, export_pgm.as_deref()),
        Command::Eval {
            pred,
            reference,
            metrics,
            data_range,
        } => commands::eval(&pred, &reference, &metrics, data_range),
        Command::Uq {
            model,
            instance,
            samples,
            out,
            group,
            seed,
        } => commands::uq(&model, &instance, samples, &out, group.as_deref(), seed),
        Command::Selftest => selftest::run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
