//! Online stage: one-shot adaptation of the mask network on an enrollment
//! pair, then causal enhancement, either whole-utterance or frame by frame.

use crate::autodiff::kernels::{affine_row, attention_row, conv_frame, layer_norm_row, leaky_relu, relu};
use crate::autodiff::{Real, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::features::{OverlapAdd, Stft};
use crate::meta::{inner_adapt, OssemLearner, Rescale, RescaleSide, Sample, Utterance};
use crate::model::{enhance_magnitude, ssm_forward, ModelConfig, ParamSet, Site};
use crate::speaker::SpeakerEmbedding;

/// Paired enrollment utterances of one speaker and that speaker's embedding.
#[derive(Clone, Debug)]
pub struct EnrollmentSet {
    pub speaker_id: String,
    pub pairs: Vec<Utterance>,
    pub embedding: SpeakerEmbedding,
}

/// Settings for [`one_shot_adapt`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOptions {
    pub ilr: f64,
    pub steps: usize,
    /// Rescale the model output by the enrollment energy ratio in the loss.
    pub feature_rescale: bool,
}

/// Copy of `theta` after `steps` gradient steps on the enrollment loss,
/// applied to the mask network only. `theta` is not modified.
pub fn one_shot_adapt(
    theta: &ParamSet<f32>,
    model: &ModelConfig,
    enroll: &EnrollmentSet,
    opts: AdaptOptions,
) -> Result<ParamSet<f32>> {
    if enroll.pairs.is_empty() {
        return Err(Error::invalid(format!("speaker {} has no enrollment utterance", enroll.speaker_id)));
    }
    if !theta.uses_mask() {
        return Ok(theta.clone());
    }
    let learner = OssemLearner::new(model.clone());
    let samples: Vec<Sample> = enroll
        .pairs
        .iter()
        .map(|utt| Sample {
            emb: enroll.embedding.as_slice(),
            utt,
        })
        .collect();
    let rescale = if opts.feature_rescale {
        Rescale::On(RescaleSide::Output)
    } else {
        Rescale::Off
    };
    Ok(inner_adapt(&learner, theta, &samples, opts.ilr as f32, opts.steps, true, rescale)?.params)
}

/// Whole-utterance enhancement: STFT, network, inverse STFT with the noisy
/// phase.
pub fn enhance_wave(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    emb: &[f32],
    stft: &Stft,
    noisy: &[f32],
) -> Result<Vec<f32>> {
    let spec = stft.stft(noisy)?;
    check_bins(model, stft)?;
    let mag = enhance_magnitude(params, model, emb, &spec.mag)?;
    stft.istft(&spec.with_mag(mag)?)
}

fn check_bins(model: &ModelConfig, stft: &Stft) -> Result<()> {
    if stft.config().bins() != model.freq_bins {
        return Err(Error::Hyperparameter(format!(
            "model expects {} frequency bins but frames of {} samples give {}",
            model.freq_bins,
            stft.config().frame_len,
            stft.config().bins()
        )));
    }
    Ok(())
}

struct Block {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Frame-synchronous causal enhancer.
///
/// Samples are pushed in arbitrary chunks; each completed analysis frame
/// runs through the network using cached convolution history and attention
/// keys/values, and finished output samples are released immediately. The
/// output is bitwise identical to [`enhance_wave`] on the whole utterance.
pub struct StreamEnhancer<'a> {
    params: &'a ParamSet<f32>,
    model: ModelConfig,
    stft: &'a Stft,
    mask: Option<Vec<f32>>,
    /// Samples of the zero-padded signal not yet fully consumed.
    pending: Vec<f32>,
    received: usize,
    frames: usize,
    conv_hist: Vec<Vec<Vec<f32>>>,
    blocks: Vec<Block>,
    ola: OverlapAdd,
    mag: Vec<f32>,
    phase: Vec<f32>,
    synth: Vec<f64>,
}

impl<'a> StreamEnhancer<'a> {
    pub fn new(params: &'a ParamSet<f32>, model: &ModelConfig, emb: &[f32], stft: &'a Stft) -> Result<Self> {
        if !model.causal {
            return Err(Error::Hyperparameter("streaming enhancement needs a causal model".into()));
        }
        check_bins(model, stft)?;
        params.check_layout(model)?;
        let mask = match model.placement.site() {
            Some(_) => Some(ssm_forward(params, emb)?.0),
            None => None,
        };
        let bins = stft.config().bins();
        Ok(Self {
            params,
            model: model.clone(),
            stft,
            mask,
            pending: vec![0.0; stft.config().head_pad()],
            received: 0,
            frames: 0,
            conv_hist: vec![Vec::new(); model.conv_layers],
            blocks: (0..model.blocks)
                .map(|_| Block {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
            ola: OverlapAdd::new(stft),
            mag: vec![0.0; bins],
            phase: vec![0.0; bins],
            synth: vec![0.0; stft.config().frame_len],
        })
    }

    /// Feeds samples and appends every finished output sample to `out`.
    pub fn push(&mut self, samples: &[f32], out: &mut Vec<f32>) -> Result<()> {
        self.received += samples.len();
        self.pending.extend_from_slice(samples);
        let (n, hop) = (self.stft.config().frame_len, self.stft.config().hop);
        while self.pending.len() >= n {
            self.process_frame(out)?;
            self.pending.drain(..hop);
        }
        Ok(())
    }

    /// Zero-pads the tail, emits the remaining frames and trims the output
    /// to the input length.
    pub fn finish(mut self, out: &mut Vec<f32>) -> Result<()> {
        if self.received == 0 {
            return Err(Error::invalid("stream ended before any audio"));
        }
        let cfg = *self.stft.config();
        let total = cfg.frames_for(self.received);
        while self.frames < total {
            if self.pending.len() < cfg.frame_len {
                self.pending.resize(cfg.frame_len, 0.0);
            }
            self.process_frame(out)?;
            self.pending.drain(..cfg.hop);
        }
        self.ola.finish(self.stft, self.received, out);
        Ok(())
    }

    /// Frames processed so far.
    pub fn frames(&self) -> usize {
        self.frames
    }

    fn site(&self, site: Site, row: &mut [f32]) {
        if let Some(m) = &self.mask {
            if self.model.placement.is_active(site) {
                row.iter_mut().zip(m).for_each(|(x, &g)| *x *= g);
            }
        }
    }

    fn process_frame(&mut self, out: &mut Vec<f32>) -> Result<()> {
        let n = self.stft.config().frame_len;
        self.stft.analyze_frame(&self.pending[..n], &mut self.mag, &mut self.phase);
        let est = self.network_frame()?;
        self.stft.synthesize_frame(&est, &self.phase, &mut self.synth);
        self.ola.push(self.stft, &self.synth, out);
        self.frames += 1;
        Ok(())
    }

    fn network_frame(&mut self) -> Result<Vec<f32>> {
        let cfg = &self.model;
        let p = self.params;
        let slope = f32::of(LEAKY_SLOPE);
        let eps = f32::of(cfg.ln_eps);
        let d = cfg.d_model;

        let mut x_in = self.mag.clone();
        self.site(Site::EncoderIn, &mut x_in);
        let mut h = x_in.clone();
        let k = cfg.conv_kernel;
        for l in 0..cfg.conv_layers {
            let hist = &mut self.conv_hist[l];
            hist.push(h);
            if hist.len() > k {
                hist.remove(0);
            }
            let missing = k - hist.len();
            let window: Vec<Option<&[f32]>> = (0..k)
                .map(|j| (j >= missing).then(|| hist[j - missing].as_slice()))
                .collect();
            let w = p.tensor(&format!("se.conv{l}.w"))?;
            let b = p.tensor(&format!("se.conv{l}.b"))?;
            let mut o = vec![0.0; d];
            conv_frame(&window, w.data(), b.data(), w.shape()[1], &mut o);
            o.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
            h = o;
        }
        self.site(Site::AttentionIn, &mut h);

        let affine = |name: &str, x: &[f32]| -> Result<Vec<f32>> {
            let w = p.tensor(&format!("{name}.w"))?;
            let b = p.tensor(&format!("{name}.b"))?;
            let mut o = vec![0.0; b.len()];
            affine_row(x, w.data(), Some(b.data()), b.len(), &mut o);
            Ok(o)
        };
        let proj = |blk: usize, m: &str, x: &[f32]| -> Result<Vec<f32>> {
            let w = p.tensor(&format!("se.block{blk}.w{m}"))?;
            let b = p.tensor(&format!("se.block{blk}.b{m}"))?;
            let mut o = vec![0.0; d];
            affine_row(x, w.data(), Some(b.data()), d, &mut o);
            Ok(o)
        };
        let norm = |blk: usize, ln: &str, x: &[f32]| -> Result<Vec<f32>> {
            let g = p.tensor(&format!("se.block{blk}.{ln}.g"))?;
            let b = p.tensor(&format!("se.block{blk}.{ln}.b"))?;
            let mut o = vec![0.0; d];
            layer_norm_row(x, g.data(), b.data(), eps, &mut o);
            Ok(o)
        };
        for blk in 0..cfg.blocks {
            let q = proj(blk, "q", &h)?;
            let kv = proj(blk, "k", &h)?;
            let vv = proj(blk, "v", &h)?;
            let cache = &mut self.blocks[blk];
            cache.keys.extend_from_slice(&kv);
            cache.values.extend_from_slice(&vv);
            let mut a = vec![0.0; d];
            let mut probs = vec![0.0; cfg.heads * (cache.keys.len() / d)];
            attention_row(&q, &cache.keys, &cache.values, cfg.heads, &mut a, &mut probs);
            let o = proj(blk, "o", &a)?;
            let r: Vec<f32> = h.iter().zip(&o).map(|(&x, &y)| x + y).collect();
            h = norm(blk, "ln1", &r)?;
            let f: Vec<f32> = affine(&format!("se.block{blk}.ff1"), &h)?.into_iter().map(relu).collect();
            let f = affine(&format!("se.block{blk}.ff2"), &f)?;
            let r: Vec<f32> = h.iter().zip(&f).map(|(&x, &y)| x + y).collect();
            h = norm(blk, "ln2", &r)?;
        }
        self.site(Site::DecoderIn, &mut h);
        let mut g: Vec<f32> = affine("se.dec", &h)?.into_iter().map(relu).collect();
        self.site(Site::DecoderOut, &mut g);
        let est: Vec<f32> = g.iter().zip(&x_in).map(|(&a, &b)| a * b).collect();
        crate::autodiff::tensor::check_finite(&est, "stream_frame")?;
        Ok(est)
    }
}

/// Streams `noisy` through a [`StreamEnhancer`] in chunks of `chunk` samples.
pub fn enhance_stream(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    emb: &[f32],
    stft: &Stft,
    noisy: &[f32],
    chunk: usize,
) -> Result<Vec<f32>> {
    let mut s = StreamEnhancer::new(params, model, emb, stft)?;
    let mut out = Vec::with_capacity(noisy.len());
    for c in noisy.chunks(chunk.max(1)) {
        s.push(c, &mut out)?;
    }
    s.finish(&mut out)?;
    Ok(out)
}
