//! The global configuration file: one JSON document covering every stage.
//! Unknown keys are rejected; CLI flags override file values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::lm::sampling::SamplingConfig;
use crate::lm::{LoraConfig, ModelConfig};
use crate::synth::SynthConfig;
use crate::trainer::{derived_seed, StageConfig};
use crate::vocab::BASE_SIZE;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub k: usize,
    pub max_iters: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            k: 100,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Probability that a record becomes an ASR sample (TTS otherwise).
    pub p: f64,
    /// Pack length for cross-modal (stage 2) training sequences.
    pub cross_pack_len: usize,
    /// Pack length for chain (stage 3) training sequences.
    pub chain_pack_len: usize,
    /// Cross-modal to text-instruction sample-count ratio for stage-2 data.
    pub mix_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            p: 0.5,
            cross_pack_len: 512,
            chain_pack_len: 1024,
            mix_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    /// Root seed; every stage that leaves its own seed at 0 derives one
    /// from this value.
    pub seed: u64,
    /// Worker threads for data-parallel steps; 0 keeps the library default.
    pub workers: usize,
    pub features: FeatureConfig,
    pub codebook: CodebookConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub t2u_model: ModelConfig,
    pub dataset: DatasetConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub t2u_train: StageConfig,
    pub sampling: SamplingConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            seed: 0,
            workers: 0,
            features: FeatureConfig::default(),
            codebook: CodebookConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            t2u_model: ModelConfig {
                layers: 2,
                model_dim: 64,
                heads: 2,
                ffn_dim: 256,
                max_len: 768,
                vocab_size: 364,
            },
            dataset: DatasetConfig::default(),
            stage1: StageConfig {
                stage: 1,
                batch_size: 16,
                peak_lr: 1e-3,
                max_len: 1024,
                steps: 500,
                warmup_steps: 50,
                seed: 0,
                save_every: 0,
                lora: None,
            },
            stage2: StageConfig {
                stage: 2,
                batch_size: 16,
                peak_lr: 1e-3,
                max_len: 512,
                steps: 1000,
                warmup_steps: 100,
                seed: 0,
                save_every: 0,
                lora: None,
            },
            stage3: StageConfig {
                stage: 3,
                batch_size: 16,
                peak_lr: 1e-3,
                max_len: 1024,
                steps: 1000,
                warmup_steps: 100,
                seed: 0,
                save_every: 0,
                lora: Some(LoraConfig::default()),
            },
            t2u_train: StageConfig {
                stage: 2,
                batch_size: 16,
                peak_lr: 1e-3,
                max_len: 768,
                steps: 1000,
                warmup_steps: 100,
                seed: 0,
                save_every: 0,
                lora: None,
            },
            sampling: SamplingConfig::default(),
        }
    }
}

impl GlobalConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GlobalConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook.k < 2 {
            return Err(Error::BadClusterCount(self.codebook.k));
        }
        self.model.validate()?;
        self.t2u_model.validate()?;
        if !(0.0..=1.0).contains(&self.dataset.p) {
            return Err(Error::Config("dataset.p must be in [0, 1]".into()));
        }
        if self.dataset.mix_ratio <= 0.0 {
            return Err(Error::Config("dataset.mix_ratio must be positive".into()));
        }
        self.sampling.validate()?;
        Ok(())
    }

    /// Expanded vocabulary size for the configured cluster count.
    pub fn vocab_size(&self) -> usize {
        BASE_SIZE as usize + self.codebook.k
    }

    /// Model config with the vocabulary size pinned to the cluster count.
    pub fn model_for_vocab(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            ..self.model.clone()
        }
    }

    pub fn t2u_model_for_vocab(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            ..self.t2u_model.clone()
        }
    }

    /// Stage config with its seed resolved against the root seed.
    pub fn resolved_stage(&self, which: u8) -> Result<StageConfig> {
        let (mut cfg, tag) = match which {
            1 => (self.stage1.clone(), "stage1"),
            2 => (self.stage2.clone(), "stage2"),
            3 => (self.stage3.clone(), "stage3"),
            other => return Err(Error::BadStage(other)),
        };
        if cfg.seed == 0 {
            cfg.seed = derived_seed(self.seed, tag);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolved_t2u(&self) -> Result<StageConfig> {
        let mut cfg = self.t2u_train.clone();
        if cfg.seed == 0 {
            cfg.seed = derived_seed(self.seed, "t2u");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
