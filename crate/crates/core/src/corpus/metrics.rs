//! Waveform and spectral quality measures.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Upper bound reported by [`si_sdr`].
pub const SI_SDR_CAP_DB: f64 = 60.0;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

fn check_lengths(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB, capped at
/// [`SI_SDR_CAP_DB`]. The estimate is projected onto the reference; the
/// projection is the target and the remainder the distortion.
pub fn si_sdr(est: &[f32], reference: &[f32]) -> Result<f64> {
    check_lengths("si_sdr", est, reference)?;
    let r_e: f64 = reference.iter().map(|&r| r as f64 * r as f64).sum();
    if r_e == 0.0 {
        return Err(Error::invalid("si_sdr undefined for a silent reference"));
    }
    let dot: f64 = est.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let a = dot / r_e;
    let (mut target, mut resid) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let t = a * r as f64;
        target += t * t;
        resid += (e as f64 - t).powi(2);
    }
    if resid == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((10.0 * (target / resid).log10()).min(SI_SDR_CAP_DB))
}

/// Mean per-frame SNR `10 log10(Σ ref² / Σ (ref − est)²)` over
/// non-overlapping frames, each clamped to `[-10, 35]` dB. Frames whose
/// reference is exactly silent are skipped.
pub fn seg_snr(est: &[f32], reference: &[f32], frame_len: usize) -> Result<f64> {
    check_lengths("seg_snr", est, reference)?;
    if frame_len == 0 {
        return Err(Error::invalid("seg_snr frame length must be positive"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (e, r) in est.chunks(frame_len).zip(reference.chunks(frame_len)) {
        let sig: f64 = r.iter().map(|&v| v as f64 * v as f64).sum();
        if sig == 0.0 {
            continue;
        }
        let noise: f64 = e.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let snr = if noise == 0.0 { SEG_SNR_MAX_DB } else { 10.0 * (sig / noise).log10() };
        total += snr.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("seg_snr: every reference frame is silent"));
    }
    Ok(total / count as f64)
}

/// Mean absolute magnitude difference.
pub fn spectral_l1(est: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    if est.shape() != reference.shape() {
        return Err(Error::shape("spectral_l1", format!("{:?} vs {:?}", est.shape(), reference.shape())));
    }
    let s: f64 = est.data().iter().zip(reference.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / est.len() as f64)
}
