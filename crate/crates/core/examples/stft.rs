//! STFT analysis and overlap-add resynthesis of a chirp.

use ossem::features::{Stft, StftConfig};

fn main() -> ossem::Result<()> {
    let stft = Stft::new(StftConfig::new(256, 128))?;
    let sr = 16_000.0;
    let wave: Vec<f32> = (0..16_000)
        .map(|n| {
            let t = n as f64 / sr;
            (0.3 * (2.0 * std::f64::consts::PI * (200.0 + 900.0 * t) * t).sin()) as f32
        })
        .collect();
    let spec = stft.stft(&wave)?;
    println!("{} frames x {} bins", spec.frames(), spec.bins());
    let back = stft.istft(&spec)?;
    let err = wave.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max reconstruction error {err:.2e}");
    Ok(())
}
