//! The run file read by `midfsl train`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use midfsl::{EpisodeConfig, FeatureMode, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MIDFSL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding `split.tsv`.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

/// Episodic settings used by `midfsl eval` when a run file is given, and by
/// the post-training evaluation of `midfsl train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub mode: FeatureMode,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    /// Evaluate on the novel split right after training.
    pub after_training: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self {
            mode: FeatureMode::Near,
            way: e.way,
            shot: e.shot,
            queries: e.queries,
            episodes: e.episodes,
            after_training: false,
        }
    }
}

impl EvalSettings {
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            episodes: self.episodes,
        }
    }
}

/// Error in user-provided configuration; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Seed from `MIDFSL_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))?;
        // relative paths are taken from the config file's directory
        let dir = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() {
            cfg.dataset = dir.join(&cfg.dataset);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = dir.join(&cfg.out_dir);
        }
        if let Some(seed) = seed_override()? {
            cfg.train.seed = seed;
        }
        cfg.train.checkpoint_dir = Some(cfg.out_dir.clone());
        Ok(cfg)
    }
}

/// Writes `value` as TOML to `path`.
pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).context("serializing effective configuration")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: RunConfig = toml::from_str("dataset = \"d\"\nout_dir = \"o\"\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval, EvalSettings::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("dataset = \"d\"\nout_dir = \"o\"\n[train]\nepoch = 3\n")
            .unwrap_err();
        assert!(err.message().contains("epoch"), "{}", err.message());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg: RunConfig = toml::from_str("dataset = \"d\"\nout_dir = \"o\"\n").unwrap();
        cfg.train.checkpoint_dir = Some("o".into());
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
