//! Declarative run configuration. A single flat TOML file can hold any
//! subset of the command parameters; command-line flags always win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::errors::{CliError, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // paths
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    // estimation
    pub method: Option<String>,
    pub r: Option<usize>,
    pub r_max: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    // data-generating process
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub reps: Option<usize>,
    pub rep: Option<usize>,
    pub seed: Option<u64>,
    pub estimators: Option<String>,
    // bands
    pub series: Option<String>,
    pub level: Option<f64>,
    pub half_band: Option<usize>,
    pub bandwidth: Option<String>,
    // toggles
    pub plot: Option<bool>,
    pub sidecar: Option<bool>,
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
