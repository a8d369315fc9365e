use std::fs;
use std::path::{Path, PathBuf};

use dtnet_core::data::SynthConfig;
use dtnet_core::eval::EvalConfig;
use dtnet_core::train::TrainConfig;
use dtnet_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Every resolved setting of one command invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub model: Option<ModelConfig>,
    pub synth: Option<SynthConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
