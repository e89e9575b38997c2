//! Waveform and spectrogram features.

mod stft;
pub mod wav;

pub use stft::{OverlapAdd, Stft, StftConfig, Window};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Magnitude spectrogram `[frames, bins]` with the phase it was analysed
/// with. Enhancement replaces `mag` and keeps `phase`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub mag: Tensor<f32>,
    /// Radians in `(-π, π]`, same layout as `mag`.
    pub phase: Vec<f32>,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the analysed waveform.
    pub n_samples: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.mag.rows()
    }

    pub fn bins(&self) -> usize {
        self.mag.cols()
    }

    /// Same geometry and phase, new magnitudes.
    pub fn with_mag(&self, mag: Tensor<f32>) -> Result<Self> {
        if mag.shape() != self.mag.shape() {
            return Err(Error::shape("with_mag", format!("{:?} vs {:?}", mag.shape(), self.mag.shape())));
        }
        Ok(Self {
            mag,
            ..self.clone()
        })
    }

    pub fn energy(&self) -> f64 {
        self.mag.data().iter().map(|&m| (m as f64) * (m as f64)).sum()
    }
}

/// Clean-to-noisy feature energy ratio used to rescale model outputs in the
/// inner loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleRatio {
    alpha: f64,
}

impl RescaleRatio {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("rescale ratio must be positive and finite, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `‖clean‖² / ‖noisy‖²` over all time-frequency cells.
pub fn rescale_ratio(clean: &Spectrogram, noisy: &Spectrogram) -> Result<RescaleRatio> {
    rescale_ratio_set(std::iter::once((clean, noisy)))
}

/// Energy ratio pooled over a set of `(clean, noisy)` pairs.
pub fn rescale_ratio_set<'a>(pairs: impl IntoIterator<Item = (&'a Spectrogram, &'a Spectrogram)>) -> Result<RescaleRatio> {
    rescale_ratio_mags(pairs.into_iter().map(|(c, n)| (&c.mag, &n.mag)))
}

/// [`rescale_ratio_set`] on bare magnitude tensors.
pub fn rescale_ratio_mags<'a>(pairs: impl IntoIterator<Item = (&'a Tensor<f32>, &'a Tensor<f32>)>) -> Result<RescaleRatio> {
    let energy = |t: &Tensor<f32>| t.data().iter().map(|&m| (m as f64) * (m as f64)).sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for (clean, noisy) in pairs {
        if clean.shape() != noisy.shape() {
            return Err(Error::shape("rescale_ratio", format!("{:?} vs {:?}", clean.shape(), noisy.shape())));
        }
        num += energy(clean);
        den += energy(noisy);
    }
    if den == 0.0 {
        return Err(Error::invalid("rescale ratio undefined: noisy features have zero energy"));
    }
    RescaleRatio::new(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rows: usize, cols: usize, mag: Vec<f32>) -> Spectrogram {
        Spectrogram {
            mag: Tensor::matrix(rows, cols, mag).unwrap(),
            phase: vec![0.0; rows * cols],
            frame_len: 2,
            hop: 1,
            sample_rate: 16_000,
            n_samples: rows,
        }
    }

    #[test]
    fn ratio_cases() {
        let x = spec(2, 2, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(rescale_ratio(&x, &x).unwrap().alpha(), 1.0);
        let y = spec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rescale_ratio(&y, &x).unwrap().alpha(), 1.875);
        let y2 = spec(2, 2, vec![4.0, 4.0, 4.0, 4.0]);
        assert_eq!(rescale_ratio(&y2, &x).unwrap().alpha(), 4.0);
    }

    #[test]
    fn ratio_errors() {
        let z = spec(2, 2, vec![0.0; 4]);
        let x = spec(2, 2, vec![1.0; 4]);
        assert!(rescale_ratio(&x, &z).is_err());
        let other = spec(1, 4, vec![1.0; 4]);
        assert!(rescale_ratio(&x, &other).is_err());
    }
}
