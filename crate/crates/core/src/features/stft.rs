use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Frame geometry shared by analysis and synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            window: Window::Hann,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize) -> Self {
        Self {
            frame_len,
            hop,
            ..Self::default()
        }
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Zero samples prepended so that every signal sample is covered by the
    /// same number of frames.
    pub fn head_pad(&self) -> usize {
        self.frame_len - self.hop
    }

    pub fn frames_for(&self, n_samples: usize) -> usize {
        (n_samples + self.head_pad()).div_ceil(self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::invalid(format!("frame_len {} must be a power of two", self.frame_len)));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::invalid(format!("hop {} must be in 1..={}", self.hop, self.frame_len)));
        }
        // Every interior sample needs a positive overlap-add normaliser.
        let w = self.window.coefficients(self.frame_len);
        let min_norm = (0..self.hop)
            .map(|r| (r..self.frame_len).step_by(self.hop).map(|i| w[i] * w[i]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if min_norm < 1e-6 {
            return Err(Error::invalid(format!(
                "window/hop pair ({:?}, {}) cannot be inverted by overlap-add",
                self.window, self.hop
            )));
        }
        Ok(())
    }
}

/// Cached FFT plans and window for one geometry.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window.coefficients(cfg.frame_len),
            fwd: planner.plan_fft_forward(cfg.frame_len),
            inv: planner.plan_fft_inverse(cfg.frame_len),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Magnitude and phase of one windowed frame. `frame` has `frame_len`
    /// samples.
    pub fn analyze_frame(&self, frame: &[f32], mag: &mut [f32], phase: &mut [f32]) {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(x as f64 * w, 0.0))
            .collect();
        self.fwd.process(&mut buf);
        for (k, c) in buf.iter().take(self.cfg.bins()).enumerate() {
            mag[k] = c.norm() as f32;
            phase[k] = wrap_phase(c.im.atan2(c.re)) as f32;
        }
    }

    /// Windowed time-domain frame from magnitude and phase.
    pub fn synthesize_frame(&self, mag: &[f32], phase: &[f32], out: &mut [f64]) {
        let n = self.cfg.frame_len;
        let bins = self.cfg.bins();
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for k in 0..bins {
            let (m, p) = (mag[k] as f64, phase[k] as f64);
            buf[k] = Complex::new(m * p.cos(), m * p.sin());
        }
        for k in 1..n - bins + 1 {
            buf[n - k] = buf[k].conj();
        }
        // Real signals have purely real DC and Nyquist bins.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = buf[i].re * scale * self.window[i];
        }
    }

    /// Overlap-add normaliser (sum of squared windows) for sample `i` of the
    /// padded signal.
    fn norm_at(&self, padded_index: usize, n_frames: usize) -> f64 {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        let last = (padded_index / hop).min(n_frames.saturating_sub(1));
        let first = (padded_index + 1).saturating_sub(n).div_ceil(hop);
        (first..=last)
            .filter(|&t| t * hop <= padded_index && padded_index < t * hop + n)
            .map(|t| {
                let w = self.window[padded_index - t * hop];
                w * w
            })
            .sum()
    }

    pub fn stft(&self, wave: &[f32]) -> Result<Spectrogram> {
        if wave.is_empty() {
            return Err(Error::invalid("stft of an empty waveform"));
        }
        let (n, hop, pad) = (self.cfg.frame_len, self.cfg.hop, self.cfg.head_pad());
        let frames = self.cfg.frames_for(wave.len());
        let bins = self.cfg.bins();
        let mut padded = vec![0.0f32; (frames - 1) * hop + n];
        padded[pad..pad + wave.len()].copy_from_slice(wave);
        let mut mag = vec![0.0f32; frames * bins];
        let mut phase = vec![0.0f32; frames * bins];
        for t in 0..frames {
            self.analyze_frame(
                &padded[t * hop..t * hop + n],
                &mut mag[t * bins..(t + 1) * bins],
                &mut phase[t * bins..(t + 1) * bins],
            );
        }
        Ok(Spectrogram {
            mag: Tensor::matrix(frames, bins, mag)?,
            phase,
            frame_len: n,
            hop,
            sample_rate: self.cfg.sample_rate,
            n_samples: wave.len(),
        })
    }

    /// Weighted overlap-add inverse using the stored phase.
    pub fn istft(&self, spec: &Spectrogram) -> Result<Vec<f32>> {
        if spec.frame_len != self.cfg.frame_len || spec.hop != self.cfg.hop || spec.bins() != self.cfg.bins() {
            return Err(Error::shape(
                "istft",
                format!(
                    "spectrogram geometry ({}, {}, {} bins) vs transform ({}, {})",
                    spec.frame_len,
                    spec.hop,
                    spec.bins(),
                    self.cfg.frame_len,
                    self.cfg.hop
                ),
            ));
        }
        if spec.phase.len() != spec.mag.len() || spec.frames() != self.cfg.frames_for(spec.n_samples) {
            return Err(Error::shape("istft", "inconsistent frame geometry"));
        }
        let mut ola = OverlapAdd::new(self);
        let mut frame = vec![0.0; self.cfg.frame_len];
        let bins = self.cfg.bins();
        let mut out = Vec::with_capacity(spec.n_samples);
        for t in 0..spec.frames() {
            self.synthesize_frame(spec.mag.row(t), &spec.phase[t * bins..(t + 1) * bins], &mut frame);
            ola.push(self, &frame, &mut out);
        }
        ola.finish(self, spec.n_samples, &mut out);
        Ok(out)
    }
}

/// Incremental weighted overlap-add. Samples are released as soon as no
/// later frame can touch them; batch and streaming synthesis share this
/// accumulator so their outputs agree bitwise.
pub struct OverlapAdd {
    acc: Vec<f64>,
    /// Padded-signal index of `acc[0]`.
    origin: usize,
    frames_pushed: usize,
}

impl OverlapAdd {
    pub fn new(stft: &Stft) -> Self {
        Self {
            acc: vec![0.0; stft.cfg.frame_len],
            origin: 0,
            frames_pushed: 0,
        }
    }

    /// Adds one synthesized frame and appends every finalized signal sample
    /// to `out`.
    pub fn push(&mut self, stft: &Stft, frame: &[f64], out: &mut Vec<f32>) {
        let (n, hop, pad) = (stft.cfg.frame_len, stft.cfg.hop, stft.cfg.head_pad());
        let start = self.frames_pushed * hop - self.origin;
        if self.acc.len() < start + n {
            self.acc.resize(start + n, 0.0);
        }
        for (a, &f) in self.acc[start..start + n].iter_mut().zip(frame) {
            *a += f;
        }
        self.frames_pushed += 1;
        // Samples before the next frame's start are final.
        let done_until = self.frames_pushed * hop;
        self.release(stft, done_until, pad, out);
    }

    fn release(&mut self, stft: &Stft, until: usize, pad: usize, out: &mut Vec<f32>) {
        let count = until.saturating_sub(self.origin).min(self.acc.len());
        for k in 0..count {
            let idx = self.origin + k;
            if idx >= pad {
                let norm = stft.norm_at(idx, self.frames_pushed);
                let v = if norm > 1e-8 { self.acc[k] / norm } else { 0.0 };
                out.push(v as f32);
            }
        }
        self.acc.drain(..count);
        self.origin += count;
    }

    /// Flushes remaining samples and trims the output to `n_samples`.
    pub fn finish(mut self, stft: &Stft, n_samples: usize, out: &mut Vec<f32>) {
        let pad = stft.cfg.head_pad();
        let end = self.origin + self.acc.len();
        self.release(stft, end, pad, out);
        out.truncate(n_samples);
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        PI
    } else {
        p
    }
}
