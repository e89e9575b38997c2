//! Harmonic speech-like signals and noise sources.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Synthetic voice class by fundamental-frequency regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    /// F0 in 85–155 Hz.
    LowF0,
    /// F0 in 165–255 Hz.
    HighF0,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::LowF0 => "low_f0",
            Gender::HighF0 => "high_f0",
        }
    }

    fn f0_bounds(self) -> (f64, f64) {
        match self {
            Gender::LowF0 => (85.0, 155.0),
            Gender::HighF0 => (165.0, 255.0),
        }
    }

    /// Vocal-tract length scaling applied to formant centres.
    fn formant_scale(self) -> f64 {
        match self {
            Gender::LowF0 => 1.0,
            Gender::HighF0 => 1.17,
        }
    }
}

/// Resonance of the spectral envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub centre_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: String,
    pub gender: Gender,
    pub f0_range: (f64, f64),
    pub formants: Vec<Formant>,
    /// Spectral tilt in dB per octave above 500 Hz.
    pub tilt_db_per_octave: f64,
}

/// Generator keyed by `(seed, tag)` so every speaker and utterance draws
/// from an independent stream.
pub fn derived_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl SyntheticSpeaker {
    pub fn random(speaker_id: impl Into<String>, gender: Gender, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = gender.f0_bounds();
        let width = rng.random_range(25.0..45.0f64).min(hi - lo);
        let start = rng.random_range(lo..=hi - width);
        let s = gender.formant_scale();
        let bands = [(300.0, 800.0), (900.0, 2200.0), (2300.0, 3100.0), (3300.0, 4200.0)];
        let formants = bands
            .iter()
            .map(|&(a, b)| Formant {
                centre_hz: rng.random_range(a..b) * s,
                bandwidth_hz: rng.random_range(90.0..220.0),
            })
            .collect();
        Self {
            speaker_id: speaker_id.into(),
            gender,
            f0_range: (start, start + width),
            formants,
            tilt_db_per_octave: rng.random_range(-9.0..-4.0),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let (a, b) = self.f0_range;
        if !(a > 0.0 && b >= a) {
            return Err(Error::invalid(format!("speaker {}: bad F0 range {a}..{b}", self.speaker_id)));
        }
        if self.formants.iter().any(|f| f.centre_hz <= 0.0 || f.centre_hz >= nyq || f.bandwidth_hz <= 0.0) {
            return Err(Error::invalid(format!("speaker {}: resonance outside (0, Nyquist)", self.speaker_id)));
        }
        Ok(())
    }

    /// Linear envelope gain at `freq` with formant centres scaled by `shift`.
    fn envelope(&self, freq: f64, shift: &[f64]) -> f64 {
        let res: f64 = self
            .formants
            .iter()
            .zip(shift)
            .enumerate()
            .map(|(i, (f, s))| {
                let x = (freq - f.centre_hz * s) / f.bandwidth_hz;
                (1.0 / (1.0 + x * x)) * 0.7f64.powi(i as i32)
            })
            .sum();
        let octaves = (freq / 500.0).max(1.0).log2();
        (res + 0.01) * 10f64.powf(self.tilt_db_per_octave * octaves / 20.0)
    }

    /// One utterance of `seconds` length: voiced syllables separated by
    /// silences, normalised to an RMS of 0.05.
    pub fn utterance(&self, rng: &mut ChaCha8Rng, seconds: f64, sample_rate: u32) -> Vec<f32> {
        let sr = sample_rate as f64;
        let n = (seconds * sr).round() as usize;
        let mut out = vec![0.0f64; n];
        let n_syl = rng.random_range(3..=5usize);
        let lead = (rng.random_range(0.03..0.08) * sr) as usize;
        let tail = (rng.random_range(0.03..0.08) * sr) as usize;
        let gaps: Vec<usize> = (1..n_syl).map(|_| (rng.random_range(0.02..0.07) * sr) as usize).collect();
        let voiced = n.saturating_sub(lead + tail + gaps.iter().sum::<usize>());
        let weights: Vec<f64> = (0..n_syl).map(|_| rng.random_range(0.6..1.4)).collect();
        let wsum: f64 = weights.iter().sum();
        let (f_lo, f_hi) = self.f0_range;
        let nyq = sr / 2.0;

        let mut pos = lead;
        for (s, weight) in weights.iter().enumerate() {
            let len = (voiced as f64 * weight / wsum) as usize;
            let shift: Vec<f64> = self.formants.iter().map(|_| rng.random_range(0.92..1.08)).collect();
            let f_start = rng.random_range(f_lo..=f_hi);
            let f_end = rng.random_range(f_lo..=f_hi);
            let amp = rng.random_range(0.6..1.0);
            let vib_rate = rng.random_range(4.0..6.0);
            let vib_phase = rng.random_range(0.0..2.0 * PI);
            let ramp = (0.02 * sr) as usize;
            let max_h = (nyq * 0.9 / f_lo) as usize;
            let mut phases: Vec<f64> = (0..max_h).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let mut gains = vec![0.0; max_h];
            for i in 0..len {
                let idx = pos + i;
                if idx >= n {
                    break;
                }
                let frac = i as f64 / len.max(1) as f64;
                let t = i as f64 / sr;
                let f0 = (f_start + (f_end - f_start) * frac) * (1.0 + 0.01 * (2.0 * PI * vib_rate * t + vib_phase).sin());
                if i % 32 == 0 {
                    for (k, g) in gains.iter_mut().enumerate() {
                        let f = (k + 1) as f64 * f0;
                        *g = if f < nyq * 0.9 { self.envelope(f, &shift) } else { 0.0 };
                    }
                }
                let env = if i < ramp {
                    0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                } else if len - i < ramp {
                    0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let mut v = 0.0;
                for (k, (ph, &g)) in phases.iter_mut().zip(&gains).enumerate() {
                    *ph += 2.0 * PI * (k + 1) as f64 * f0 / sr;
                    if g > 0.0 {
                        v += g * ph.sin();
                    }
                }
                out[idx] = amp * env * v;
            }
            pos += len + gaps.get(s).copied().unwrap_or(0);
        }
        normalise(&mut out, 0.05);
        out.into_iter().map(|v| v as f32).collect()
    }
}

fn normalise(x: &mut [f64], target_rms: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = target_rms / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Additive noise sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    /// Sum of several synthetic talkers.
    Babble,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

pub fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// Approximately 1/f noise from Kellet's six-pole filter on white noise.
pub fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w: f64 = normal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            y as f32
        })
        .collect()
}

/// Sum of one utterance from each of `talkers`, trimmed or looped to `n`.
pub fn babble_noise(rng: &mut ChaCha8Rng, talkers: &[SyntheticSpeaker], n: usize, sample_rate: u32) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for t in talkers {
        let secs = n as f64 / sample_rate as f64;
        let u = t.utterance(rng, secs.max(0.2), sample_rate);
        let offset = rng.random_range(0..u.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o += u[(offset + i) % u.len()];
        }
    }
    out
}

/// `clean + g · noise` with `g` chosen so that the clean-to-noise energy
/// ratio is `snr_db`. Shorter noise is looped.
pub fn mix_at_snr(clean: &[f32], noise: &[f32], snr_db: f64) -> Result<Vec<f32>> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::invalid("mix_at_snr on an empty signal"));
    }
    let looped = |i: usize| noise[i % noise.len()] as f64;
    let e_clean: f64 = clean.iter().map(|&v| v as f64 * v as f64).sum();
    let e_noise: f64 = (0..clean.len()).map(|i| looped(i) * looped(i)).sum();
    if e_clean == 0.0 || e_noise == 0.0 {
        return Err(Error::invalid("mix_at_snr needs nonzero clean and noise energy"));
    }
    let g = (e_clean / (e_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().enumerate().map(|(i, &c)| (c as f64 + g * looped(i)) as f32).collect())
}
