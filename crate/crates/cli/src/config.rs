//! Strict JSON run configuration. Every section is optional and falls back
//! to its defaults; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use mcn_core::model::Architecture;
use mcn_core::synthdata::GeneratorConfig;
use mcn_core::train::{ProbeConfig, TrainConfig, DEFAULT_LAMBDA_GRID};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::ResLstm,
            hidden_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train / validation / test fractions.
    pub fractions: [f64; 3],
    /// Defaults to the seed the dataset was generated with, so every command
    /// reading the same dataset sees the same split.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.63, 0.07, 0.3],
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    pub weights: Vec<f64>,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            weights: vec![0.5, 0.5],
        }
    }
}

/// Input files; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    pub sweep: SweepConfig,
    pub fuse: FuseConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self, path: &Path) -> CliResult<()> {
        let wrap = |e: mcn_core::Error| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        self.generator.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        let bad = |message: String| {
            Err(CliError::Config {
                path: path.to_path_buf(),
                message,
            })
        };
        if self.model.hidden_size == 0 {
            return bad("model.hidden_size must be >= 1".into());
        }
        let total: f64 = self.split.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("split.fractions sum to {total}, not 1"));
        }
        if self.sweep.grid.is_empty() {
            return bad("sweep.grid is empty".into());
        }
        Ok(())
    }
}
