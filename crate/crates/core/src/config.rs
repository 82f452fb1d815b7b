//! Run configuration, read from a TOML file with unknown-key rejection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::optim::OptimizerConfig;
use crate::preprocess::TaskConfig;

/// Environment variable naming the root that relative data folders resolve against.
pub const DATA_ROOT_ENV: &str = "UVAE_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clean: PathBuf,
    pub corrupted: PathBuf,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Prefetch worker threads.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Batches buffered ahead of the training loop.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
}

fn default_crop() -> usize {
    64
}
fn default_batch() -> usize {
    16
}
fn default_workers() -> usize {
    1
}
fn default_prefetch() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

fn default_checkpoint_every() -> u64 {
    10_000
}
fn default_eval_every() -> u64 {
    1_000
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Parses a config file. Relative data folders are resolved against
    /// `data_root` when given, otherwise against the config file's directory.
    pub fn load(path: &Path, data_root: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = match data_root {
            Some(r) => r.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.clean, &mut self.data.corrupted] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Checks every section without touching the data folders.
    pub fn validate_schema(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        if self.data.crop == 0 || self.data.batch == 0 {
            return Err(CoreError::Config("data.crop and data.batch must be positive".into()));
        }
        if self.data.crop % self.model.divisor() != 0 {
            return Err(CoreError::Config(format!(
                "data.crop = {} must be divisible by 2^(N-1) = {}",
                self.data.crop,
                self.model.divisor()
            )));
        }
        if self.data.workers == 0 || self.data.prefetch == 0 {
            return Err(CoreError::Config("data.workers and data.prefetch must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(CoreError::Config("checkpoint_every and eval_every must be positive".into()));
        }
        Ok(())
    }

    /// Full validation: schema plus existence of the referenced folders.
    pub fn validate(&self) -> Result<()> {
        self.validate_schema()?;
        for (key, p) in [("data.clean", &self.data.clean), ("data.corrupted", &self.data.corrupted)] {
            if !p.is_dir() {
                return Err(CoreError::Config(format!("{key}: folder {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nclean = \"a\"\ncorrupted = \"b\"\n";

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.optimizer.total_iters, 200_000);
        assert_eq!(cfg.data.batch, 16);
        cfg.validate_schema().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}[task]\nsigma_xx = 3\n");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(CoreError::Config(_))));
        assert!(RunConfig::from_toml_str(&format!("sead = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn missing_folders_fail_validation() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/nonexistent-root"));
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }
}
