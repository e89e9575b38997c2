//! Binary parameter checkpoints.
//!
//! ```text
//! "OSSM" | version u32 | header_len u32 | header_crc u32 | header JSON | sections
//! ```
//!
//! All integers are little-endian. The JSON header carries the model and
//! STFT hyperparameters, a provenance record and a directory of sections; each
//! section is a run of raw little-endian `f32` values with its own CRC-32.
//! Sections are stored back to back in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::StftConfig;
use crate::model::{ModelConfig, ParamSet, Partition};
use crate::speaker::SpeakerEmbedding;

pub const MAGIC: [u8; 4] = *b"OSSM";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const EMBEDDING_SECTION: &str = "speaker_embedding";

/// Where a set of parameters came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex SHA-256 of the configuration that produced the parameters.
    pub config_sha256: String,
    pub seed: u64,
    pub epoch: usize,
}

impl Provenance {
    pub fn new(config_json: &str, seed: u64, epoch: usize) -> Self {
        Self {
            config_sha256: sha256_hex(config_json.as_bytes()),
            seed,
            epoch,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    /// Absent for the speaker embedding section.
    partition: Option<Partition>,
    shape: Vec<usize>,
    crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    stft: StftConfig,
    provenance: Provenance,
    sections: Vec<Section>,
    embedding_speaker: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub params: ParamSet<f32>,
    pub provenance: Provenance,
    /// Present for speaker-adapted checkpoints.
    pub embedding: Option<SpeakerEmbedding>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, stft: StftConfig, params: ParamSet<f32>, provenance: Provenance) -> Self {
        Self {
            model,
            stft,
            params,
            provenance,
            embedding: None,
        }
    }

    /// Parameters for a model configured as `cfg`, rejecting any
    /// hyperparameter or layout mismatch.
    pub fn params_for(&self, cfg: &ModelConfig) -> Result<&ParamSet<f32>> {
        if &self.model != cfg {
            return Err(Error::Hyperparameter(format!(
                "checkpoint was saved for {} but the model is configured as {}",
                describe(&self.model),
                describe(cfg)
            )));
        }
        self.params.check_layout(cfg)?;
        Ok(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections = Vec::with_capacity(self.params.len() + 1);
        let mut payload = Vec::new();
        let mut add = |name: &str, partition, shape: &[usize], data: &[f32]| {
            let start = payload.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            sections.push(Section {
                name: name.to_string(),
                partition,
                shape: shape.to_vec(),
                crc32: crc32fast::hash(&payload[start..]),
            });
        };
        for p in self.params.iter() {
            add(p.name(), Some(p.partition()), p.tensor.shape(), p.tensor.data());
        }
        if let Some(e) = &self.embedding {
            add(EMBEDDING_SECTION, None, &[e.as_slice().len()], e.as_slice());
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            stft: self.stft,
            provenance: self.provenance.clone(),
            sections,
            embedding_speaker: self.embedding.as_ref().map(|e| e.speaker_id.clone()),
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Checkpoint(format!("truncated preamble ({} bytes)", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let header_len = word(8) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header_bytes = &bytes[PREAMBLE..header_end];
        if crc32fast::hash(header_bytes) != word(12) {
            return Err(Error::Checksum {
                section: "header".into(),
            });
        }
        let header: Header = serde_json::from_slice(header_bytes)?;

        let mut pos = header_end;
        let mut params = ParamSet::new();
        let mut embedding = None;
        for s in header.sections {
            let n = s
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("section `{}` has an oversized shape", s.name)))?;
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Checkpoint(format!("truncated section `{}`", s.name)))?;
            let raw = &bytes[pos..end];
            if crc32fast::hash(raw) != s.crc32 {
                return Err(Error::Checksum { section: s.name });
            }
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            match s.partition {
                Some(part) => params.push(s.name, part, Tensor::new(s.shape, data)?)?,
                None if s.name == EMBEDDING_SECTION => {
                    let id = header
                        .embedding_speaker
                        .clone()
                        .ok_or_else(|| Error::Checkpoint("embedding section without a speaker id".into()))?;
                    embedding = Some(SpeakerEmbedding::from_stored(id, data)?);
                }
                None => return Err(Error::Checkpoint(format!("section `{}` has no partition", s.name))),
            }
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            model: header.model,
            stft: header.stft,
            params,
            provenance: header.provenance,
            embedding,
        })
    }
}

fn describe(c: &ModelConfig) -> String {
    format!(
        "F={} D={} heads={} blocks={} placement={} causal={}",
        c.freq_bins, c.d_model, c.heads, c.blocks, c.placement, c.causal
    )
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
