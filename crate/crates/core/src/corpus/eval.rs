use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{seg_snr, si_sdr, spectral_l1};
use super::{Corpus, Split};
use crate::adapt::{one_shot_adapt, AdaptOptions};
use crate::error::{Error, Result};
use crate::features::Stft;
use crate::model::{enhance_magnitude, ssm_forward, ModelConfig, ParamSet};
use crate::speaker::SpeakerEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub adapt_ilr: f64,
    pub adapt_steps: usize,
    pub adapt_rescale: bool,
    /// Segmental SNR frame length in samples.
    pub seg_frame: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            adapt_ilr: 1e-3,
            adapt_steps: 1,
            adapt_rescale: false,
            seg_frame: 256,
        }
    }
}

impl EvalOptions {
    pub fn adapt(&self) -> AdaptOptions {
        AdaptOptions {
            ilr: self.adapt_ilr,
            steps: self.adapt_steps,
            feature_rescale: self.adapt_rescale,
        }
    }
}

/// Mean scores over a set of utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub si_sdr: f64,
    pub seg_snr: f64,
    pub spectral_l1: f64,
}

impl Metrics {
    fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        Metrics {
            si_sdr: items.iter().map(|m| m.si_sdr).sum::<f64>() / n,
            seg_snr: items.iter().map(|m| m.seg_snr).sum::<f64>() / n,
            spectral_l1: items.iter().map(|m| m.spectral_l1).sum::<f64>() / n,
        }
    }

    fn minus(self, o: Metrics) -> Metrics {
        Metrics {
            si_sdr: self.si_sdr - o.si_sdr,
            seg_snr: self.seg_snr - o.seg_snr,
            spectral_l1: self.spectral_l1 - o.spectral_l1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.si_sdr.is_finite() && self.seg_snr.is_finite() && self.spectral_l1.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerReport {
    pub speaker_id: String,
    pub n_test: usize,
    pub noisy: Metrics,
    pub unadapted: Metrics,
    pub adapted: Metrics,
    /// `adapted − unadapted`.
    pub delta: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub speakers: Vec<SpeakerReport>,
    /// Means over speakers; absent when there are no test speakers.
    pub mean_noisy: Option<Metrics>,
    pub mean_unadapted: Option<Metrics>,
    pub mean_adapted: Option<Metrics>,
    pub mean_delta: Option<Metrics>,
}

fn score(est: &[f32], clean: &[f32], est_mag: &crate::autodiff::Tensor<f32>, clean_mag: &crate::autodiff::Tensor<f32>, seg: usize) -> Result<Metrics> {
    Ok(Metrics {
        si_sdr: si_sdr(est, clean)?,
        seg_snr: seg_snr(est, clean, seg)?,
        spectral_l1: spectral_l1(est_mag, clean_mag)?,
    })
}

/// Enhances every test utterance of every test speaker with `theta` and
/// with its one-shot adaptation on the speaker's enrollment pair.
pub fn eval_adaptation(
    theta: &ParamSet<f32>,
    model: &ModelConfig,
    stft: &Stft,
    corpus: &Corpus,
    embeddings: &BTreeMap<String, SpeakerEmbedding>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for spk in corpus.manifest.test_speakers() {
        let enroll = corpus.enrollment(&spk.speaker_id, stft, embeddings)?;
        let adapted = one_shot_adapt(theta, model, &enroll, opts.adapt())?;
        let emb = enroll.embedding.as_slice();
        let (mut noisy_m, mut base_m, mut adapt_m) = (Vec::new(), Vec::new(), Vec::new());
        for rec in corpus.manifest.records(&spk.speaker_id, Split::Test) {
            let (noisy, clean) = corpus.read_pair(rec)?;
            let noisy_spec = stft.stft(&noisy)?;
            let clean_mag = stft.stft(&clean)?.mag;
            noisy_m.push(score(&noisy, &clean, &noisy_spec.mag, &clean_mag, opts.seg_frame)?);
            for (params, sink) in [(theta, &mut base_m), (&adapted, &mut adapt_m)] {
                let mag = enhance_magnitude(params, model, emb, &noisy_spec.mag)?;
                let wave = stft.istft(&noisy_spec.with_mag(mag.clone())?)?;
                sink.push(score(&wave, &clean, &mag, &clean_mag, opts.seg_frame)?);
            }
        }
        let (unadapted, adapted_mean) = (Metrics::mean(&base_m), Metrics::mean(&adapt_m));
        report.speakers.push(SpeakerReport {
            speaker_id: spk.speaker_id.clone(),
            n_test: base_m.len(),
            noisy: Metrics::mean(&noisy_m),
            unadapted,
            adapted: adapted_mean,
            delta: adapted_mean.minus(unadapted),
        });
    }
    if !report.speakers.is_empty() {
        let col = |f: fn(&SpeakerReport) -> Metrics| Some(Metrics::mean(&report.speakers.iter().map(f).collect::<Vec<_>>()));
        report.mean_noisy = col(|s| s.noisy);
        report.mean_unadapted = col(|s| s.unadapted);
        report.mean_adapted = col(|s| s.adapted);
        report.mean_delta = col(|s| s.delta);
    }
    Ok(report)
}

/// Centred moving average; windows are truncated at the edges.
pub(crate) fn smooth(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// One CSV row per speaker: `speaker_id,gender,m_1..m_W,s_1..s_W` where `m`
/// is the mask and `s` its 5-point moving average over frequency.
pub fn export_masks<'a>(
    theta: &ParamSet<f32>,
    speakers: impl IntoIterator<Item = (&'a str, &'a str, &'a SpeakerEmbedding)>,
) -> Result<String> {
    if !theta.uses_mask() {
        return Err(Error::invalid("the model has no mask network (placement non)"));
    }
    let mut csv = String::new();
    for (id, gender, emb) in speakers {
        let mask: Vec<f64> = ssm_forward(theta, emb.as_slice())?.0.iter().map(|&v| v as f64).collect();
        write!(csv, "{id},{gender}").expect("write to string");
        for v in mask.iter().chain(&smooth(&mask, 5)) {
            write!(csv, ",{v}").expect("write to string");
        }
        csv.push('\n');
    }
    Ok(csv)
}
