//! Run configuration: a sectioned TOML file with documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::WorldConfig;
use crate::model::ModelConfig;
use crate::train::{Stage1Config, Stage2Config};

pub const OUTPUT_DIR_ENV: &str = "LBR_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0} required")]
    Missing(&'static str),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Which synthetic task the corpus section generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Entities with aliases; retrieval with alias-form queries.
    #[default]
    Alias,
    /// Random passages for bottleneck reconstruction.
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub task: Task,
    pub n_entities: usize,
    pub n_aliases: usize,
    pub n_facts: usize,
    pub n_relations: usize,
    pub n_values: usize,
    pub holdout_fraction: f64,
    pub copy_passages: usize,
    pub copy_eval_passages: usize,
    pub copy_len: usize,
    pub copy_pool: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: Task::Alias,
            n_entities: 100,
            n_aliases: 2,
            n_facts: 2,
            n_relations: 2,
            n_values: 2,
            holdout_fraction: 0.2,
            copy_passages: 512,
            copy_eval_passages: 64,
            copy_len: 10,
            copy_pool: 16,
        }
    }
}

/// Fixed example budget split between the stages; see
/// [`split_allocation`](crate::train::split_allocation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationConfig {
    pub r_learn: f64,
    pub budget: usize,
    /// Passes over each stage's subset; steps are derived from it.
    pub epochs: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            r_learn: 0.5,
            budget: 100,
            epochs: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Held-in questions decoded for BLEU/ROUGE; 0 disables generation eval.
    pub generation_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            generation_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Section-level seeds are derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<AllocationConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        let mut c = Self {
            seed,
            output_dir: None,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            allocation: None,
            eval: EvalConfig::default(),
        };
        c.derive_seeds();
        c
    }

    /// Overwrites section seeds from the global seed, and makes the
    /// encoder use the generative stage's compression ratio.
    pub fn derive_seeds(&mut self) {
        self.model.seed = self.seed;
        self.stage1.seed = self.seed.wrapping_add(1);
        self.stage2.seed = self.seed.wrapping_add(2);
        self.stage2.compression_ratio = self.stage1.compression_ratio;
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            n_entities: self.corpus.n_entities,
            n_aliases: self.corpus.n_aliases,
            n_facts: self.corpus.n_facts,
            n_relations: self.corpus.n_relations,
            n_values: self.corpus.n_values,
            vocab_size: self.model.vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.stage1.validate().map_err(|e| invalid(&e))?;
        self.stage2.validate().map_err(|e| invalid(&e))?;
        let h = self.corpus.holdout_fraction;
        if self.corpus.task == Task::Alias && !(h > 0.0 && h < 1.0) {
            return Err(ConfigError::Invalid(
                "holdout_fraction must be in (0, 1)".into(),
            ));
        }
        if self.corpus.task == Task::Copy
            && (self.corpus.copy_len == 0
                || self.corpus.copy_pool == 0
                || self.corpus.copy_passages == 0)
        {
            return Err(ConfigError::Invalid("copy task needs nonzero sizes".into()));
        }
        if self.eval.k == 0 {
            return Err(ConfigError::Invalid("eval.k must be >= 1".into()));
        }
        if let Some(a) = &self.allocation {
            if !(0.0..=1.0).contains(&a.r_learn) || !(a.epochs > 0.0) {
                return Err(ConfigError::Invalid(
                    "allocation needs r_learn in [0, 1] and epochs > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Configured output directory, else `$LBR_OUTPUT_DIR`.
    pub fn resolve_output_dir(&self) -> Result<PathBuf, ConfigError> {
        if let Some(d) = &self.output_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(ConfigError::Missing("output_dir (or LBR_OUTPUT_DIR)")),
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let value: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
    if !value.contains_key("seed") {
        return Err(ConfigError::Missing("seed"));
    }
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
    cfg.derive_seeds();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}
