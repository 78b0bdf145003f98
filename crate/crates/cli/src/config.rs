//! Experiment configuration: a TOML document whose sections mirror the
//! library's configuration types. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use grip_core::moe::NetShape;
use grip_core::unlearn::{PretrainConfig, TaskConfig, UnlearnConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ENV_OUTPUT_DIR: &str = "GRIP_OUTPUT_DIR";
pub const ENV_THREADS: &str = "GRIP_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One task, network and unlearning seed per entry.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for independent seeds and grid cells.
    pub threads: usize,
    pub shape: NetShape,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    /// Also carries the forcing policy in `[unlearn.attack]`.
    pub unlearn: UnlearnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: PathBuf::from("grip_out"),
            threads: 1,
            shape: NetShape::default(),
            task: TaskConfig::default(),
            pretrain: PretrainConfig::default(),
            unlearn: UnlearnConfig::default(),
        }
    }
}


impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `GRIP_OUTPUT_DIR` and `GRIP_THREADS` from `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = env(ENV_OUTPUT_DIR).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(t) = env(ENV_THREADS).filter(|v| !v.is_empty()) {
            self.threads = t
                .parse()
                .map_err(|_| CliError::Usage(format!("{ENV_THREADS} must be a positive integer, got '{t}'")))?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without compute.
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| CliError::Usage(format!("invalid config: {m}"));
        if self.seeds.is_empty() {
            return Err(usage("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(usage("seeds must be distinct".into()));
        }
        if self.threads == 0 {
            return Err(usage("threads must be >= 1".into()));
        }
        if self.shape.dim != self.task.dim || self.shape.classes != self.task.classes {
            return Err(usage(format!(
                "shape (dim {}, classes {}) does not match task (dim {}, classes {})",
                self.shape.dim, self.shape.classes, self.task.dim, self.task.classes
            )));
        }
        if self.shape.layers == 0 || self.shape.k == 0 || self.shape.k > self.shape.experts {
            return Err(usage("shape needs layers >= 1 and 1 <= k <= experts".into()));
        }
        self.task.validate().map_err(|e| usage(e.to_string()))?;
        self.unlearn.validate().map_err(|e| usage(e.to_string()))?;
        self.unlearn
            .attack
            .resolved_m(self.shape.experts, self.shape.k)
            .map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn task_for(&self, seed: u64) -> TaskConfig {
        TaskConfig { seed, ..self.task.clone() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}
