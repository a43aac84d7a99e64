//! Layered option resolution: command-line flags (which clap also fills from
//! `DIFFGUARD_*` environment variables) take precedence over the optional
//! TOML config file, which takes precedence over per-mode defaults.

use std::path::Path;

use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub tau: Option<f64>,
    pub s_ns: Option<f64>,
    pub lambda: Option<f64>,
    pub stride: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub size: Option<u32>,
    pub embed_dim: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Input(format!("cannot read config '{}': {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Input(format!("bad config '{}': {e}", path.display())))
    }
}

/// flag/env > config file > default.
pub fn resolve<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn resolve_owned<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
