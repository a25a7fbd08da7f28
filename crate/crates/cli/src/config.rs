//! Layered run configuration: built-in defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sfa_core::attack::AttackConfig;
use sfa_core::dataset::DatasetConfig;
use sfa_core::detector::{DetectorConfig, PostprocessConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvalSection {
    pub postprocess: PostprocessConfig,
    /// `name:severity` selectors, e.g. `brightness:3`.
    pub defenses: Vec<String>,
    pub spatter_seed: u64,
}


#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serialising run config")
    }

    /// Stable 64-bit FNV-1a hash of the resolved configuration, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(self).context("serialising run config")?;
        Ok(fnv1a_hex(json.as_bytes()))
    }
}

pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Assigns `$value` to `$target` when the flag was given.
macro_rules! overlay {
    ($($target:expr => $value:expr),* $(,)?) => {
        $(if let Some(v) = $value {
            $target = v;
        })*
    };
}
pub(crate) use overlay;
