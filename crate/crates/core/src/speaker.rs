//! Speaker embeddings: CSV ingestion of externally extracted vectors and a
//! deterministic spectral-statistics extractor for synthetic experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{Stft, StftConfig};

pub const EMBEDDING_DIM: usize = 192;
const BANDS: usize = EMBEDDING_DIM / 2;
/// Log-magnitude floor relative to the loudest STFT bin of the utterance.
const REL_FLOOR: f32 = 1e-5;

/// Unit-norm 192-dimensional speaker vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    vec: Vec<f32>,
}

impl SpeakerEmbedding {
    /// Validates the dimension and L2-normalises.
    pub fn new(speaker_id: impl Into<String>, vec: Vec<f32>) -> Result<Self> {
        if vec.len() != EMBEDDING_DIM {
            return Err(Error::invalid(format!(
                "speaker embedding must have {EMBEDDING_DIM} dimensions, got {}",
                vec.len()
            )));
        }
        let norm = vec.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::invalid("speaker embedding has zero or non-finite norm"));
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            vec: vec.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    /// Takes an already-normalised vector verbatim.
    pub(crate) fn from_stored(speaker_id: impl Into<String>, vec: Vec<f32>) -> Result<Self> {
        if vec.len() != EMBEDDING_DIM || vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("stored speaker embedding is malformed"));
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            vec,
        })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vec
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.vec.iter().zip(&other.vec).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

/// Reads `speaker_id,v1,...,v192` rows. Blank lines are ignored.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, path)
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("").trim();
        if id.is_empty() {
            return Err(err(line_no, "empty speaker id".into()));
        }
        let values = fields
            .map(|f| f.trim().parse::<f32>().map_err(|e| err(line_no, format!("bad value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != EMBEDDING_DIM {
            return Err(err(
                line_no,
                format!("speaker {id}: expected {EMBEDDING_DIM} values, found {}", values.len()),
            ));
        }
        let emb = SpeakerEmbedding::new(id, values).map_err(|e| err(line_no, e.to_string()))?;
        if out.insert(id.to_string(), emb).is_some() {
            return Err(err(line_no, format!("duplicate speaker id {id}")));
        }
    }
    Ok(out)
}

pub fn save_embeddings<'a>(path: impl AsRef<Path>, embeddings: impl IntoIterator<Item = &'a SpeakerEmbedding>) -> Result<()> {
    let mut s = String::new();
    for e in embeddings {
        s.push_str(&e.speaker_id);
        for v in &e.vec {
            write!(s, ",{v}").expect("write to string");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Deterministic substitute speaker extractor.
///
/// Log-magnitude STFT (512-sample frames at 16 kHz) with the utterance mean
/// removed, pooled into 96 linearly spaced triangular bands; the embedding
/// is the per-band time average followed by the per-band standard
/// deviation. Amplitude scaling only shifts the log spectrum, so it cancels.
pub fn builtin_embed(speaker_id: impl Into<String>, wave: &[f32]) -> Result<SpeakerEmbedding> {
    let cfg = StftConfig::default();
    if wave.len() < cfg.sample_rate as usize {
        return Err(Error::invalid(format!(
            "builtin_embed needs at least one second of audio, got {} samples",
            wave.len()
        )));
    }
    let stft = Stft::new(cfg)?;
    let spec = stft.stft(wave)?;
    let (frames, bins) = (spec.frames(), spec.bins());
    let peak = spec.mag.data().iter().copied().fold(0.0f32, f32::max);
    if peak == 0.0 {
        return Err(Error::invalid("builtin_embed on a silent waveform"));
    }
    let floor = peak * REL_FLOOR;
    let logmag: Vec<f64> = spec.mag.data().iter().map(|&m| (m.max(floor) as f64).ln()).collect();
    let mean = logmag.iter().sum::<f64>() / logmag.len() as f64;

    let bands = triangular_bands(bins, BANDS);
    let mut band_series = vec![vec![0.0f64; frames]; BANDS];
    for t in 0..frames {
        let row = &logmag[t * bins..(t + 1) * bins];
        for (b, weights) in bands.iter().enumerate() {
            let (num, den) = weights
                .iter()
                .fold((0.0, 0.0), |(n, d), &(k, w)| (n + w * (row[k] - mean), d + w));
            band_series[b][t] = num / den;
        }
    }
    let mut vec = Vec::with_capacity(EMBEDDING_DIM);
    let means: Vec<f64> = band_series.iter().map(|s| s.iter().sum::<f64>() / frames as f64).collect();
    vec.extend(means.iter().map(|&m| m as f32));
    for (s, &m) in band_series.iter().zip(&means) {
        let var = s.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / frames as f64;
        vec.push(var.sqrt() as f32);
    }
    SpeakerEmbedding::new(speaker_id, vec)
}

/// `(bin, weight)` lists for `n` triangles with linearly spaced centres
/// spanning bins `0..bins`.
fn triangular_bands(bins: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let span = (bins - 1) as f64;
    let step = span / (n + 1) as f64;
    (1..=n)
        .map(|b| {
            let centre = b as f64 * step;
            (0..bins)
                .filter_map(|k| {
                    let w = 1.0 - (k as f64 - centre).abs() / step;
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}
