//! Fully resolved settings for each subcommand.
//!
//! Resolution order is defaults, then the `--config` file, then flags. The
//! resolved value is echoed to `<out>/<command>.config.json`, and passing
//! that file back through `--config` reproduces the run.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dlp_core::backbone::BackboneConfig;
use dlp_core::bench::BenchConfig;
use dlp_core::engine::EngineConfig;
use dlp_core::evaluation::EvalMode;
use dlp_core::lora::LoraTrainConfig;
use dlp_core::router::{HashVectorizer, RouterConfig, RouterTrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Common {
    pub seed: u64,
    pub out: PathBuf,
    pub format: Format,
}

impl Default for Common {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            format: Format::Text,
        }
    }
}

pub trait Settings: Serialize + DeserializeOwned + Default {
    /// File stem of the echoed config.
    const NAME: &'static str;
    fn common(&self) -> &Common;
    fn common_mut(&mut self) -> &mut Common;
}

macro_rules! settings {
    ($ty:ident, $name:literal) => {
        impl Settings for $ty {
            const NAME: &'static str = $name;
            fn common(&self) -> &Common {
                &self.common
            }
            fn common_mut(&mut self) -> &mut Common {
                &mut self.common
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenData {
    #[serde(flatten)]
    pub common: Common,
    pub tasks: usize,
    pub per_task: usize,
}

impl Default for GenData {
    fn default() -> Self {
        Self {
            common: Common::default(),
            tasks: 8,
            per_task: 200,
        }
    }
}
settings!(GenData, "gen-data");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InitBackbone {
    #[serde(flatten)]
    pub common: Common,
    pub data: Option<PathBuf>,
    pub backbone: BackboneConfig,
}
settings!(InitBackbone, "init-backbone");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRouter {
    #[serde(flatten)]
    pub common: Common,
    pub data: Option<PathBuf>,
    pub vectorizer: HashVectorizer,
    pub train: RouterTrainConfig,
    /// Routing parameters written next to the checkpoint for `run`.
    pub routing: RouterConfig,
}
settings!(TrainRouter, "train-router");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainAdapters {
    #[serde(flatten)]
    pub common: Common,
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub lora: LoraTrainConfig,
}

impl Default for TrainAdapters {
    fn default() -> Self {
        Self {
            common: Common::default(),
            data: None,
            backbone: None,
            lora: dlp_core::evaluation::PipelineConfig::default().lora,
        }
    }
}
settings!(TrainAdapters, "train-adapters");

/// Trained artifacts used for routed inference.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Artifacts {
    pub backbone: Option<PathBuf>,
    pub router: Option<PathBuf>,
    pub adapters: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Run {
    #[serde(flatten)]
    pub common: Common,
    #[serde(flatten)]
    pub artifacts: Artifacts,
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    pub trace: bool,
    pub engine: EngineConfig,
}
settings!(Run, "run");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Eval {
    #[serde(flatten)]
    pub common: Common,
    #[serde(flatten)]
    pub artifacts: Artifacts,
    pub data: Option<PathBuf>,
    pub split: Split,
    /// Pre-computed predictions (JSONL) to score instead of decoding.
    pub predictions: Option<PathBuf>,
    pub mode: EvalMode,
    pub engine: EngineConfig,
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            common: Common::default(),
            artifacts: Artifacts::default(),
            data: None,
            split: Split::Test,
            predictions: None,
            mode: EvalMode::Dlp,
            engine: EngineConfig::default(),
        }
    }
}
settings!(Eval, "eval");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bench {
    #[serde(flatten)]
    pub common: Common,
    /// One harness run per entry.
    pub n_adapters: Vec<usize>,
    pub bench: BenchConfig,
}

impl Default for Bench {
    fn default() -> Self {
        Self {
            common: Common::default(),
            n_adapters: vec![50, 100],
            bench: BenchConfig::default(),
        }
    }
}
settings!(Bench, "bench");

/// Defaults overlaid with the `--config` file, if any.
pub fn load<S: Settings>(config: Option<&Path>) -> dlp_core::Result<S> {
    match config {
        Some(path) => dlp_core::io::read_json(path),
        None => Ok(S::default()),
    }
}

/// Writes the resolved settings into the output directory.
pub fn echo<S: Settings>(settings: &S) -> dlp_core::Result<PathBuf> {
    let path = settings.common().out.join(format!("{}.config.json", S::NAME));
    dlp_core::io::write_json_pretty(&path, settings)?;
    Ok(path)
}
