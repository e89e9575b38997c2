//! Offline training: supervised pretraining followed by speaker-task
//! meta-learning.
//!
//! Each meta-iteration copies the current weights, adapts the copy on one
//! speaker's support set (the inner loop), and applies the query-set
//! gradient taken at the adapted weights to the original weights (the outer
//! loop). The outer update is first order: it does not differentiate
//! through the inner step.

mod learner;
mod schedule;
mod tasks;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use learner::{Learner, OssemLearner, Sample};
pub use schedule::ilr_schedule;
pub use tasks::{make_tasks, MetaTask, RngState, TaskSampler};
pub use train::{
    inner_adapt, loss_and_grads, meta_train, outer_step, supervised_pretrain, supervised_step, Adam, Adapted, EpochLog,
};

/// One paired utterance as magnitude spectrograms `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

/// All training utterances of one speaker with that speaker's embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerData {
    pub speaker_id: String,
    pub embedding: Vec<f32>,
    pub utterances: Vec<Utterance>,
}

/// Speaker-organised training data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet {
    pub speakers: Vec<SpeakerData>,
}

impl TrainSet {
    pub fn sample(&self, speaker: usize, utt: usize) -> Sample<'_> {
        let s = &self.speakers[speaker];
        Sample {
            emb: &s.embedding,
            utt: &s.utterances[utt],
        }
    }

    pub fn n_utterances(&self) -> usize {
        self.speakers.iter().map(|s| s.utterances.len()).sum()
    }
}

/// Where the clean-to-noisy energy ratio enters the inner-loop loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescaleSide {
    /// `L1(α · model(X), Y)`.
    #[default]
    Output,
    /// `L1(model(α · X), Y)`.
    Input,
}

/// Inner-loop rescaling as applied to one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Rescale {
    #[default]
    Off,
    On(RescaleSide),
}

/// Training techniques that can be toggled for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Techniques {
    /// Inner loop updates only the SSM partition.
    pub speaker_inner_loop: bool,
    /// Zero-then-warmup inner learning rate; otherwise a constant peak rate.
    pub ilr_schedule: bool,
    /// Clean-to-noisy energy rescaling in the inner-loop loss.
    pub feature_rescale: bool,
}

impl Default for Techniques {
    fn default() -> Self {
        Self {
            speaker_inner_loop: true,
            ilr_schedule: true,
            feature_rescale: true,
        }
    }
}

impl Techniques {
    pub fn none() -> Self {
        Self {
            speaker_inner_loop: false,
            ilr_schedule: false,
            feature_rescale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Outer-loop rate.
    pub olr: f64,
    /// Inner-loop rate after warmup. Zero disables the inner loop.
    pub ilr_peak: f64,
    pub inner_steps: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub techniques: Techniques,
    pub rescale_side: RescaleSide,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            iterations_per_epoch: 1000,
            olr: 1e-4,
            ilr_peak: 1e-3,
            inner_steps: 1,
            n_support: 1,
            n_query: 20,
            techniques: Techniques::default(),
            rescale_side: RescaleSide::Output,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.olr.is_finite() && self.olr >= 0.0) {
            return Err(Error::Hyperparameter(format!("olr must be a nonnegative number, got {}", self.olr)));
        }
        if !(self.ilr_peak.is_finite() && self.ilr_peak >= 0.0) {
            return Err(Error::Hyperparameter(format!(
                "ilr_peak must be a nonnegative number, got {}",
                self.ilr_peak
            )));
        }
        if self.n_support == 0 || self.n_query == 0 {
            return Err(Error::Hyperparameter("n_support and n_query must be positive".into()));
        }
        if self.techniques.ilr_schedule {
            ilr_schedule(1, self.epochs, self.ilr_peak)?;
        }
        Ok(())
    }

    /// Inner rate for a 1-based epoch.
    pub fn ilr(&self, epoch: usize) -> Result<f64> {
        if self.techniques.ilr_schedule {
            ilr_schedule(epoch, self.epochs, self.ilr_peak)
        } else {
            Ok(self.ilr_peak)
        }
    }

    pub fn inner_rescale(&self) -> Rescale {
        if self.techniques.feature_rescale {
            Rescale::On(self.rescale_side)
        } else {
            Rescale::Off
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// How pretraining batches are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Utterances drawn uniformly from the whole training set.
    #[default]
    Mixed,
    /// The query set of the task sequence the meta loop would draw.
    PerSpeaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub batching: Batching,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            iterations_per_epoch: 1000,
            lr: 1e-3,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            batching: Batching::Mixed,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Hyperparameter(format!("pretrain lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Hyperparameter("pretrain batch_size must be positive".into()));
        }
        Ok(())
    }
}
