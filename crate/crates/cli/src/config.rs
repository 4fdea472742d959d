use std::path::{Path, PathBuf};

use purify_core::detect::EmConfig;
use purify_core::flatten::{Normalization, DEFAULT_KNN};
use purify_core::mitigate::KmeansConfig;
use purify_core::pipeline::AnalysisConfig;
use purify_core::repr_store::MatrixFormat;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Settings of one invocation. Loaded from `--config` if given, then
/// overridden field by field by command-line flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: MatrixFormat,
    pub cpv_threshold: f64,
    pub tau: f64,
    pub em: EmConfig,
    pub kmeans: KmeansConfig,
    pub k_nn: usize,
    pub normalization: Normalization,
    pub seed: u64,
    pub threads: Option<usize>,
    pub fail_on_detect: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        RunConfig {
            train: None,
            labels: None,
            clean: None,
            weights: None,
            report: None,
            out: None,
            format: MatrixFormat::default(),
            cpv_threshold: a.cpv_threshold,
            tau: a.tau,
            em: a.em,
            kmeans: a.kmeans,
            k_nn: DEFAULT_KNN,
            normalization: Normalization::default(),
            seed: a.seed,
            threads: None,
            fail_on_detect: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("--config: cannot read {}: {e}", path.display())))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("--config: invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            cpv_threshold: self.cpv_threshold,
            tau: self.tau,
            em: self.em,
            kmeans: self.kmeans,
            seed: self.seed,
        }
    }
}

/// Path taken from a flag or the config file; must name an existing file
/// or directory.
pub fn require_input(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf, UsageError> {
    let path = value
        .clone()
        .ok_or_else(|| UsageError(format!("missing required flag {flag}")))?;
    if !path.exists() {
        return Err(UsageError(format!("{flag}: no such file or directory: {}", path.display())));
    }
    Ok(path)
}

pub fn require_output(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf, UsageError> {
    value
        .clone()
        .ok_or_else(|| UsageError(format!("missing required flag {flag}")))
}
