//! Configuration files and tensor inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reconkit::data::DatasetSpec;
use reconkit::io::{import_pnm, TnsrFile};
use reconkit::model::RamConfig;
use reconkit::noise::NoiseParams;
use reconkit::operators::OperatorSpec;
use reconkit::train::{TaskSpec, TrainConfig};
use reconkit::Tensor;

use crate::{CliResult, Failure};

/// A task given by preset name or spelled out in full.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskEntry {
    Preset {
        preset: String,
        channels: usize,
        dataset: DatasetSpec,
    },
    Full(TaskSpec),
}

impl TaskEntry {
    pub fn resolve(self) -> reconkit::Result<TaskSpec> {
        match self {
            TaskEntry::Preset {
                preset,
                channels,
                dataset,
            } => TaskSpec::preset(&preset, channels, dataset),
            TaskEntry::Full(spec) => {
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default)]
    pub model: RamConfig,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-step CSV log, relative to the config file.
    #[serde(default)]
    pub log: Option<PathBuf>,
}

/// Operator and noise for `simulate --task spec.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub operator: OperatorSpec,
    #[serde(default)]
    pub noise: NoiseParams,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::from(reconkit::Error::Format(format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

/// Reads an image from TNSR (entry `x`, or the only entry) or PGM/PPM.
pub fn read_image(path: &Path) -> CliResult<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "pgm" || ext == "ppm" {
        return Ok(import_pnm(path)?);
    }
    let file = TnsrFile::read(path)?;
    if let Some(x) = file.get("x") {
        return Ok(x.clone());
    }
    let mut entries = file.iter();
    match (entries.next(), entries.next()) {
        (Some((_, t)), None) => Ok(t.clone()),
        _ => Err(reconkit::Error::Format(format!(
            "{}: expected an entry named \"x\" or a single entry",
            path.display()
        ))
        .into()),
    }
}

pub fn write_image(x: &Tensor, path: &Path) -> CliResult {
    TnsrFile::new().with("x", x.clone()).write(path)?;
    Ok(())
}
