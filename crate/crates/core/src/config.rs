//! JSON run configuration shared by every command.
//!
//! Every field has a default and unknown keys are rejected. The defaults
//! describe the full-scale model; [`RunConfig::desk`] is the laptop-sized
//! setup used by the examples and the acceptance suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptOptions;
use crate::checkpoint::sha256_hex;
use crate::corpus::{CorpusConfig, EvalOptions};
use crate::error::{Error, Result};
use crate::features::StftConfig;
use crate::meta::{PretrainConfig, TrainConfig};
use crate::model::ModelConfig;

/// Online adaptation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Defaults to the training inner rate `train.ilr_peak`.
    pub ilr: Option<f64>,
    pub steps: usize,
    pub feature_rescale: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            ilr: None,
            steps: 1,
            feature_rescale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
    pub corpus_dir: PathBuf,
    /// Embedding CSV used instead of the corpus's built-in embeddings.
    pub embeddings: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    /// Segmental SNR frame length in samples.
    pub seg_snr_frame: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            corpus_dir: PathBuf::from("corpus"),
            embeddings: None,
            corpus: CorpusConfig::default(),
            stft: StftConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            seg_snr_frame: 256,
        }
    }
}

impl RunConfig {
    /// 8 training and 2 test speakers, F = 129, D = 64, one block.
    pub fn desk() -> Self {
        Self {
            seed: Some(1),
            stft: StftConfig::new(256, 128),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig {
                epochs: 24,
                iterations_per_epoch: 50,
                lr: 2e-3,
                batch_size: 4,
                ..PretrainConfig::default()
            },
            train: TrainConfig {
                epochs: 26,
                iterations_per_epoch: 10,
                olr: 1e-3,
                ilr_peak: 0.1,
                n_query: 4,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Seconds-long smoke-test scale: three speakers, F = 33.
    pub fn micro() -> Self {
        Self {
            seed: Some(1),
            corpus: CorpusConfig {
                n_speakers: 3,
                n_test_speakers: 1,
                utts_per_speaker: 6,
                max_seconds: 1.0,
                ..CorpusConfig::default()
            },
            stft: StftConfig::new(64, 32),
            model: ModelConfig::tiny(),
            pretrain: PretrainConfig {
                epochs: 2,
                iterations_per_epoch: 10,
                lr: 2e-3,
                batch_size: 2,
                ..PretrainConfig::default()
            },
            train: TrainConfig {
                epochs: 26,
                iterations_per_epoch: 2,
                olr: 1e-3,
                ilr_peak: 0.1,
                n_query: 2,
                ..TrainConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }

    /// Applies the master seed to every stage and checks consistency.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.corpus.seed = seed;
            self.pretrain.seed = seed;
            self.train.seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        if self.stft.bins() != self.model.freq_bins {
            return Err(Error::Hyperparameter(format!(
                "stft frame_len {} gives {} bins but model.freq_bins is {}",
                self.stft.frame_len,
                self.stft.bins(),
                self.model.freq_bins
            )));
        }
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if let Some(ilr) = self.adapt.ilr {
            if !(ilr.is_finite() && ilr >= 0.0) {
                return Err(Error::Hyperparameter(format!("adapt.ilr must be nonnegative, got {ilr}")));
            }
        }
        if self.seg_snr_frame == 0 {
            return Err(Error::Hyperparameter("seg_snr_frame must be positive".into()));
        }
        Ok(())
    }

    /// Seed used to initialise model parameters.
    pub fn init_seed(&self) -> u64 {
        self.pretrain.seed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn adapt_options(&self) -> AdaptOptions {
        AdaptOptions {
            ilr: self.adapt.ilr.unwrap_or(self.train.ilr_peak),
            steps: self.adapt.steps,
            feature_rescale: self.adapt.feature_rescale,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let a = self.adapt_options();
        EvalOptions {
            adapt_ilr: a.ilr,
            adapt_steps: a.steps,
            adapt_rescale: a.feature_rescale,
            seg_frame: self.seg_snr_frame,
        }
    }
}
