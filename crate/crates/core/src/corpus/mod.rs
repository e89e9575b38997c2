//! Deterministic synthetic multi-speaker corpus, quality metrics and the
//! adaptation evaluation harness.
//!
//! Each speaker is a harmonic source with its own F0 range and resonance
//! envelope, in one of two F0 regimes. Utterances are mixed with white,
//! pink or babble noise at a sampled SNR. Speakers are split into training
//! speakers and test speakers; every test speaker has exactly one
//! enrollment utterance, which is excluded from that speaker's test set.

mod eval;
mod metrics;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::EnrollmentSet;
use crate::error::{Error, Result};
use crate::features::wav::{read_wav, write_wav, SAMPLE_RATE};
use crate::features::Stft;
use crate::meta::{SpeakerData, TrainSet, Utterance};
use crate::speaker::{builtin_embed, load_embeddings, save_embeddings, SpeakerEmbedding};

pub use eval::{eval_adaptation, export_masks, EvalOptions, EvalReport, Metrics, SpeakerReport};
pub use metrics::{seg_snr, si_sdr, spectral_l1, SEG_SNR_MAX_DB, SEG_SNR_MIN_DB, SI_SDR_CAP_DB};
pub use synth::{
    babble_noise, derived_rng, mix_at_snr, pink_noise, white_noise, Formant, Gender, NoiseKind, SyntheticSpeaker,
};

const BABBLE_TALKERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Total speakers, training and test.
    pub n_speakers: usize,
    /// The last `n_test_speakers` speakers are held out for adaptation.
    pub n_test_speakers: usize,
    pub utts_per_speaker: usize,
    pub noises: Vec<NoiseKind>,
    pub snrs_db: Vec<f64>,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            n_test_speakers: 2,
            utts_per_speaker: 22,
            noises: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble],
            snrs_db: vec![-5.0, 0.0, 5.0],
            min_seconds: 1.0,
            max_seconds: 1.4,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Hyperparameter(m));
        if self.n_speakers < 2 {
            return bad(format!("n_speakers must be at least 2, got {}", self.n_speakers));
        }
        if self.n_test_speakers > self.n_speakers {
            return bad("n_test_speakers exceeds n_speakers".into());
        }
        if self.utts_per_speaker < 2 {
            return bad("utts_per_speaker must be at least 2".into());
        }
        if self.noises.is_empty() {
            return bad("noise list is empty".into());
        }
        if self.snrs_db.is_empty() || self.snrs_db.iter().any(|s| !s.is_finite()) {
            return bad("SNR list must be nonempty and finite".into());
        }
        if !(self.min_seconds >= 1.0 && self.max_seconds >= self.min_seconds) {
            return bad("utterances must last at least one second (min_seconds >= 1, max_seconds >= min_seconds)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Enroll,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    /// Relative to the manifest directory.
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub noise_type: NoiseKind,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub seed: u64,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<UtteranceRecord>,
    /// Built-in speaker embeddings, relative to the manifest directory.
    pub embeddings_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

impl CorpusManifest {
    pub fn speaker(&self, id: &str) -> Option<&SyntheticSpeaker> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn records(&self, speaker_id: &str, split: Split) -> impl Iterator<Item = &UtteranceRecord> + '_ {
        let id = speaker_id.to_string();
        self.utterances.iter().filter(move |u| u.speaker_id == id && u.split == split)
    }

    /// Speakers that own an enrollment utterance.
    pub fn test_speakers(&self) -> Vec<&SyntheticSpeaker> {
        self.speakers
            .iter()
            .filter(|s| self.records(&s.speaker_id, Split::Enroll).next().is_some())
            .collect()
    }

    pub fn train_speakers(&self) -> Vec<&SyntheticSpeaker> {
        self.speakers
            .iter()
            .filter(|s| self.records(&s.speaker_id, Split::Train).next().is_some())
            .collect()
    }

    /// Checks the split contract: one enrollment record per test speaker and
    /// no utterance in more than one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert(&u.utt_id) {
                return Err(Error::invalid(format!("utterance {} listed twice", u.utt_id)));
            }
            if self.speaker(&u.speaker_id).is_none() {
                return Err(Error::invalid(format!("utterance {} has unknown speaker {}", u.utt_id, u.speaker_id)));
            }
        }
        for s in &self.speakers {
            let enroll = self.records(&s.speaker_id, Split::Enroll).count();
            let test = self.records(&s.speaker_id, Split::Test).count();
            if test > 0 && enroll != 1 {
                return Err(Error::invalid(format!(
                    "test speaker {} has {enroll} enrollment utterances, expected 1",
                    s.speaker_id
                )));
            }
        }
        Ok(())
    }
}

/// Writes the corpus under `dir` (clean/, noisy/, manifest.json,
/// embeddings.csv) and returns the manifest. Identical seeds give
/// byte-identical files.
pub fn gen_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("clean"))?;
    std::fs::create_dir_all(dir.join("noisy"))?;
    let sr = SAMPLE_RATE;
    let speakers: Vec<SyntheticSpeaker> = (0..cfg.n_speakers)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::LowF0 } else { Gender::HighF0 };
            SyntheticSpeaker::random(format!("spk{i:02}"), gender, &mut derived_rng(cfg.seed, &format!("speaker/{i}")))
        })
        .collect();
    let babblers: Vec<SyntheticSpeaker> = (0..BABBLE_TALKERS)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::LowF0 } else { Gender::HighF0 };
            SyntheticSpeaker::random(format!("babble{i}"), gender, &mut derived_rng(cfg.seed, &format!("babbler/{i}")))
        })
        .collect();
    for s in speakers.iter().chain(&babblers) {
        s.validate(sr)?;
    }

    let first_test = cfg.n_speakers - cfg.n_test_speakers;
    let mut records = Vec::new();
    let mut embeddings = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let is_test = si >= first_test;
        for u in 0..cfg.utts_per_speaker {
            let utt_id = format!("{}_u{u:02}", spk.speaker_id);
            let mut rng = derived_rng(cfg.seed, &format!("utt/{utt_id}"));
            let secs = rng.random_range(cfg.min_seconds..=cfg.max_seconds);
            let clean = spk.utterance(&mut rng, secs, sr);
            let noise_type = cfg.noises[rng.random_range(0..cfg.noises.len())];
            let snr_db = cfg.snrs_db[rng.random_range(0..cfg.snrs_db.len())];
            let noise = match noise_type {
                NoiseKind::White => white_noise(&mut rng, clean.len()),
                NoiseKind::Pink => pink_noise(&mut rng, clean.len()),
                NoiseKind::Babble => babble_noise(&mut rng, &babblers, clean.len(), sr),
            };
            let noisy = mix_at_snr(&clean, &noise, snr_db)?;
            let clean_path = PathBuf::from("clean").join(format!("{utt_id}.wav"));
            let noisy_path = PathBuf::from("noisy").join(format!("{utt_id}.wav"));
            write_wav(dir.join(&clean_path), &clean)?;
            write_wav(dir.join(&noisy_path), &noisy)?;
            let split = match (is_test, u) {
                (false, _) => Split::Train,
                (true, 0) => Split::Enroll,
                (true, _) => Split::Test,
            };
            if u == 0 {
                // Embed what was written to disk so reloading reproduces it.
                let stored = read_wav(dir.join(&clean_path))?;
                embeddings.push(builtin_embed(&spk.speaker_id, &stored)?);
            }
            records.push(UtteranceRecord {
                utt_id,
                speaker_id: spk.speaker_id.clone(),
                clean_path,
                noisy_path,
                noise_type,
                snr_db,
                split,
            });
        }
    }
    save_embeddings(dir.join(EMBEDDINGS_FILE), &embeddings)?;
    let manifest = CorpusManifest {
        sample_rate: sr,
        seed: cfg.seed,
        speakers,
        utterances: records,
        embeddings_path: PathBuf::from(EMBEDDINGS_FILE),
    };
    manifest.validate()?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub dir: PathBuf,
}

impl Corpus {
    /// Reads `manifest.json` from a corpus directory, or a manifest file
    /// given directly.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", file.display())))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(Self {
            manifest,
            dir: file.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Embeddings from `override_path`, or the corpus's built-in file.
    pub fn embeddings(&self, override_path: Option<&Path>) -> Result<BTreeMap<String, SpeakerEmbedding>> {
        match override_path {
            Some(p) => load_embeddings(p),
            None => load_embeddings(self.dir.join(&self.manifest.embeddings_path)),
        }
    }

    pub fn read_pair(&self, rec: &UtteranceRecord) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((read_wav(self.dir.join(&rec.noisy_path))?, read_wav(self.dir.join(&rec.clean_path))?))
    }

    pub fn load_utterance(&self, rec: &UtteranceRecord, stft: &Stft) -> Result<Utterance> {
        let (noisy, clean) = self.read_pair(rec)?;
        Ok(Utterance {
            id: rec.utt_id.clone(),
            noisy: stft.stft(&noisy)?.mag,
            clean: stft.stft(&clean)?.mag,
        })
    }

    /// Magnitude features of every training-split utterance, grouped by
    /// speaker.
    pub fn train_set(&self, stft: &Stft, embeddings: &BTreeMap<String, SpeakerEmbedding>) -> Result<TrainSet> {
        let mut speakers = Vec::new();
        for spk in self.manifest.train_speakers() {
            let emb = lookup(embeddings, &spk.speaker_id)?;
            let utterances = self
                .manifest
                .records(&spk.speaker_id, Split::Train)
                .map(|r| self.load_utterance(r, stft))
                .collect::<Result<Vec<_>>>()?;
            speakers.push(SpeakerData {
                speaker_id: spk.speaker_id.clone(),
                embedding: emb.as_slice().to_vec(),
                utterances,
            });
        }
        Ok(TrainSet { speakers })
    }

    pub fn enrollment(
        &self,
        speaker_id: &str,
        stft: &Stft,
        embeddings: &BTreeMap<String, SpeakerEmbedding>,
    ) -> Result<EnrollmentSet> {
        let pairs = self
            .manifest
            .records(speaker_id, Split::Enroll)
            .map(|r| self.load_utterance(r, stft))
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("speaker {speaker_id} has no enrollment utterance")));
        }
        Ok(EnrollmentSet {
            speaker_id: speaker_id.to_string(),
            pairs,
            embedding: lookup(embeddings, speaker_id)?.clone(),
        })
    }
}

fn lookup<'a>(embeddings: &'a BTreeMap<String, SpeakerEmbedding>, id: &str) -> Result<&'a SpeakerEmbedding> {
    embeddings
        .get(id)
        .ok_or_else(|| Error::invalid(format!("no speaker embedding for {id}")))
}
