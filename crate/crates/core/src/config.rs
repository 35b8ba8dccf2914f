//! Versioned JSON configuration files read by the command-line tool.
//!
//! Every file carries a `format_version`; unknown keys anywhere are errors so
//! that a misspelt option cannot silently fall back to its default.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_bytes;
use crate::model::SubnetConfig;
use crate::synth::SceneConfig;
use crate::train::TrainConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Configuration file for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfigFile {
    pub format_version: u32,
    #[serde(default)]
    pub scene: SceneConfig,
}

/// Configuration file for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub format_version: u32,
    #[serde(default)]
    pub model: SubnetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

trait Versioned {
    fn format_version(&self) -> u32;
}

impl Versioned for GenConfigFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl Versioned for TrainConfigFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

fn parse<T: DeserializeOwned + Versioned>(text: &[u8], origin: &str) -> Result<T> {
    let value: T = serde_json::from_slice(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    if value.format_version() != CONFIG_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{origin}: unsupported config format version {} (expected {CONFIG_FORMAT_VERSION})",
            value.format_version()
        )));
    }
    Ok(value)
}

impl GenConfigFile {
    pub fn parse(text: &[u8]) -> Result<Self> {
        let file: Self = parse(text, "generation config")?;
        file.scene.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = parse(&read_bytes(path)?, &path.display().to_string())?;
        file.scene.validate()?;
        Ok(file)
    }
}

impl TrainConfigFile {
    pub fn parse(text: &[u8]) -> Result<Self> {
        let file: Self = parse(text, "training config")?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = parse(&read_bytes(path)?, &path.display().to_string())?;
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

impl Default for TrainConfigFile {
    fn default() -> Self {
        TrainConfigFile { format_version: CONFIG_FORMAT_VERSION, model: SubnetConfig::default(), train: TrainConfig::default() }
    }
}

impl Default for GenConfigFile {
    fn default() -> Self {
        GenConfigFile { format_version: CONFIG_FORMAT_VERSION, scene: SceneConfig::default() }
    }
}
