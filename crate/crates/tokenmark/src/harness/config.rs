//! Experiment configuration: one TOML file determines every output byte.
//!
//! Unknown keys are rejected and every section validates its own ranges, so
//! a typo fails fast with a field path instead of silently running a
//! different experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::DatasetConfig;
use crate::permutation::PermutationFamily;
use crate::transformer::ModelConfig;
use crate::watermark::scheme_b::{EmbedConfigB, TriggerConfig};
use crate::watermark::scheme_s::EmbedConfigS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    B,
    S,
    TriggerBaseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 600, batch: 32, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub seq_len: usize,
    pub bias: f32,
    /// Cross-checked against the model's vocabulary when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            classes: 10,
            seq_len: 16,
            bias: 0.75,
            vocab_size: None,
            train_samples: 2048,
            eval_samples: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    pub scheme: Scheme,
    pub family: PermutationFamily,
    #[serde(default = "default_target_label")]
    pub target_label: usize,
    #[serde(default)]
    pub b: EmbedConfigB,
    #[serde(default)]
    pub s: EmbedConfigS,
    #[serde(default = "default_trigger")]
    pub trigger: TriggerConfig,
}

fn default_target_label() -> usize {
    0
}

fn default_trigger() -> TriggerConfig {
    TriggerConfig { trigger: vec![0, 1], y_t: 0, poison_rate: 0.1, steps: 300, batch: 32, lr: 1e-3 }
}

impl Default for WatermarkSection {
    fn default() -> Self {
        WatermarkSection {
            scheme: Scheme::S,
            family: PermutationFamily::HeadsAndWithin,
            target_label: default_target_label(),
            b: EmbedConfigB::default(),
            s: EmbedConfigS::default(),
            trigger: default_trigger(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    pub set_size: usize,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        ExtractionSection { set_size: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub watermark: WatermarkSection,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackConfig>,
}

impl ExperimentConfig {
    pub fn toy(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            model: ModelConfig::toy(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            watermark: WatermarkSection::default(),
            extraction: ExtractionSection::default(),
            attacks: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| format!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.dataset_config().validate().map_err(|e| format!("dataset: {e}"))?;
        if let Some(v) = self.dataset.vocab_size {
            if v != self.model.vocab_size {
                return Err(format!(
                    "dataset.vocab_size = {} disagrees with model.vocab_size = {}",
                    v, self.model.vocab_size
                ));
            }
        }
        if self.dataset.seq_len > self.model.max_seq_len {
            return Err(format!(
                "dataset.seq_len = {} exceeds model.max_seq_len = {}",
                self.dataset.seq_len, self.model.max_seq_len
            ));
        }
        if self.watermark.target_label >= self.dataset.classes {
            return Err(format!(
                "watermark.target_label = {} out of {} classes",
                self.watermark.target_label, self.dataset.classes
            ));
        }
        if self.extraction.set_size == 0 {
            return Err("extraction.set_size must be positive (empty extraction set)".into());
        }
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| format!("attack[{i}]: {e}"))?;
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            classes: self.dataset.classes,
            vocab_size: self.model.vocab_size,
            seq_len: self.dataset.seq_len,
            bias: self.dataset.bias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.watermark.s.steps, 500);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[train]\nsteps = 5\nbatch = 2\nlr = 0.1\ntypo_key = 3\n")
            .unwrap_err();
        assert!(err.contains("typo_key"), "error should name the bad key: {err}");
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str(
            "seed = 1\n[dataset]\nclasses = 10\nseq_len = 16\nbias = 0.75\nvocab_size = 32\ntrain_samples = 10\neval_samples = 10\n",
        )
        .unwrap_err();
        assert!(err.contains("vocab_size"), "{err}");
    }

    #[test]
    fn zero_extraction_set_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[extraction]\nset_size = 0\n")
            .unwrap_err();
        assert!(err.contains("extraction"), "{err}");
    }

    #[test]
    fn attack_list_round_trips() {
        let text = r#"
seed = 3
[[attack]]
kind = "prune"
granularity = "weight_magnitude"
ratios = [0.1, 0.2]
seed = 9
[[attack]]
kind = "quantize"
bits = [5, 4, 3, 2, 1]
seed = 10
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.attacks.len(), 2);
        let bad = text.replace("[0.1, 0.2]", "[1.5]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
