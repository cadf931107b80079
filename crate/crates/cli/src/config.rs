//! Experiment configuration: one TOML file, defaults matching the synthetic
//! experiment. Every run copies its resolved config into the output
//! directory for provenance.

use anyhow::{bail, Context};
use patchlab::features::DataConfig;
use patchlab::network::Activation;
use patchlab::training::{PgdSettings, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    /// Filters per class.
    pub m: usize,
    pub weight_std: f64,
    /// Activation exponent q.
    pub exponent: u32,
    /// Activation threshold.
    pub threshold: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            m: 100,
            weight_std: 0.01,
            exponent: 3,
            threshold: 1.0,
        }
    }
}

impl NetworkSection {
    pub fn activation(&self) -> anyhow::Result<Activation> {
        Ok(Activation::new(self.exponent, self.threshold)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    /// Attack rate through the mean empirical loss.
    pub attack_lr: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub pgd_steps: usize,
    /// Defaults to `epsilon / 4` when absent.
    pub pgd_step_size: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.1,
            attack_lr: 1e3,
            epsilon: 1.2,
            epochs: 1000,
            eval_every: 25,
            pgd_steps: 20,
            pgd_step_size: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            attack_lr: self.attack_lr,
            epsilon: self.epsilon,
            epochs: self.epochs,
            mode,
            eval_every: self.eval_every,
            attack_eval: PgdSettings {
                steps: self.pgd_steps,
                step_size: self.pgd_step_size.unwrap_or(self.epsilon / 4.0),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train_n: usize,
    pub test_n: usize,
    pub data: DataConfig,
    pub network: NetworkSection,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
            train_n: 100,
            test_n: 1000,
            data: DataConfig::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("config needs at least one seed");
        }
        if self.train_n == 0 || self.test_n == 0 {
            bail!("train_n and test_n must be positive");
        }
        self.data.validate().context("data section")?;
        self.network.activation().context("network section")?;
        if self.train.epsilon < 0.0 {
            bail!("train.epsilon must be nonnegative");
        }
        self.train
            .train_config(TrainMode::Standard)
            .validate()
            .context("train section")?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.train.epochs, 1000);
        assert_eq!(back.network.m, 100);
        assert_eq!(back.data.patches, 16);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("seeds = [7]\n[train]\nepochs = 50\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(cfg.test_n, 1000);
    }

    #[test]
    fn negative_epsilon_rejected() {
        let cfg: ExperimentConfig = toml::from_str("[train]\nepsilon = -1.0\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
