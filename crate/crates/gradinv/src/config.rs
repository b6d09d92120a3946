//! Experiment configuration.

use std::path::PathBuf;

use gradinv_core::attack::AttackConfig;
use gradinv_core::flsim::{TrainingConfig, UpdateKind};
use gradinv_core::multiepoch::DEFAULT_PRE_BUDGET;
use gradinv_core::nn::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n: usize,
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    /// One CIFAR-10 binary batch file.
    Cifar10 {
        path: PathBuf,
        /// Records to load, in order; all 10000 when absent.
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
}

fn default_channels() -> usize {
    3
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ModelConfig {
    /// `tiny-cnn` or `mini-resnet`.
    pub name: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "tiny-cnn".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub local_steps: usize,
    /// Client SGD learning rate.
    pub lr: f64,
    /// `None` keeps the dataset order in every epoch.
    pub shuffle_seed: Option<u64>,
    pub update: UpdateKind,
    /// Keep the global model fixed, so every round sees the initial model.
    pub freeze: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 1,
            batch_size: 1,
            local_steps: 1,
            lr: 1e-4,
            shuffle_seed: Some(0),
            update: UpdateKind::Gradient,
            freeze: false,
        }
    }
}

impl ScheduleConfig {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            local_steps: self.local_steps,
            lr: self.lr,
            shuffle_seed: self.shuffle_seed,
            kind: self.update,
            freeze: self.freeze,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct MultiEpochConfig {
    pub enabled: bool,
    /// Iterations of each pre-reconstruction.
    pub pre_budget: usize,
    /// Only pair records whose inferred label lists intersect.
    pub label_filter: bool,
}

impl Default for MultiEpochConfig {
    fn default() -> Self {
        MultiEpochConfig {
            enabled: false,
            pre_budget: DEFAULT_PRE_BUDGET,
            label_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub multiepoch: MultiEpochConfig,
    /// Attack only the first this many records of each epoch.
    #[serde(default)]
    pub max_records: Option<usize>,
    /// When set, the first record is also attacked in one-batch and
    /// simulation mode for this many iterations each, and both timings are
    /// written to `timing.csv`.
    #[serde(default)]
    pub timing_probe: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec, Error> {
        let [c, h, w] = input;
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}x{w}")));
        }
        ModelSpec::preset(&self.model.name, c, h, classes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        match &self.dataset {
            DatasetConfig::Synthetic { n, size, channels, classes, .. } => {
                if *n == 0 || *size < 4 || *channels == 0 || *classes < 2 {
                    return bad("synthetic dataset needs n >= 1, size >= 4, channels >= 1, classes >= 2".into());
                }
            }
            DatasetConfig::Cifar10 { indices, .. } => {
                if indices.as_ref().is_some_and(|i| i.is_empty()) {
                    return bad("cifar10 indices must not be empty".into());
                }
            }
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 || s.local_steps == 0 {
            return bad("schedule epochs, batch-size and local-steps must be positive".into());
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return bad("schedule lr must be positive".into());
        }
        if s.update == UpdateKind::Gradient && s.local_steps != 1 {
            return bad("gradient updates require local-steps = 1".into());
        }
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.multiepoch.enabled {
            if s.epochs < 2 {
                return bad("multiepoch needs at least two epochs".into());
            }
            if self.multiepoch.pre_budget == 0 {
                return bad("multiepoch pre-budget must be positive".into());
            }
        }
        if self.timing_probe == Some(0) {
            return bad("timing-probe must be positive".into());
        }
        Ok(())
    }
}

/// Parses and validates a JSON config. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Error> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

pub fn to_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"dataset": {"kind": "synthetic", "n": 4, "size": 8}}"#;

    #[test]
    fn defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.attack.iterations, 10_000);
        assert_eq!(c.attack.lr, 0.1);
        assert_eq!(c.attack.tv_weight, 1e-4);
        assert_eq!(c.attack.beta, 50.0);
        assert_eq!(c.schedule.lr, 1e-4);
        assert_eq!(c.multiepoch.pre_budget, 2000);
        assert_eq!(
            c.dataset,
            DatasetConfig::Synthetic {
                n: 4,
                size: 8,
                channels: 3,
                classes: 10,
                seed: 0
            }
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(r#"{"dataset": {"kind": "synthetic", "n": 4, "size": 8}, "schedule": {"batchsize": 2}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("batchsize"), "{err}");
        assert!(err.contains("schedule"), "{err}");
    }

    #[test]
    fn missing_dataset() {
        let err = parse_config("{}").unwrap_err().to_string();
        assert!(err.contains("dataset"), "{err}");
    }

    #[test]
    fn invalid_values() {
        let text = r#"{"dataset": {"kind": "synthetic", "n": 4, "size": 8}, "attack": {"iterations": 0}}"#;
        assert!(matches!(parse_config(text), Err(Error::Config(_))));
        let text = r#"{"dataset": {"kind": "synthetic", "n": 4, "size": 8}, "schedule": {"local-steps": 2}}"#;
        assert!(matches!(parse_config(text), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip() {
        let text = r#"{"dataset": {"kind": "cifar10", "path": "data_batch_1.bin", "indices": [3, 1]},
            "schedule": {"update": "model-delta", "local-steps": 4, "shuffle-seed": null},
            "attack": {"fedavg-mode": "simulation"}, "max-records": 2}"#;
        let c = parse_config(text).unwrap();
        let again = parse_config(&to_json(&c)).unwrap();
        assert_eq!(c, again);
        assert_eq!(to_json(&again), to_json(&c));
    }
}
