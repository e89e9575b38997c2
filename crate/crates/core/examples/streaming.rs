//! Frame-by-frame enhancement matches whole-utterance enhancement bit for bit.

use std::time::Instant;

use ossem::adapt::{enhance_wave, StreamEnhancer};
use ossem::features::{Stft, StftConfig};
use ossem::model::{ModelConfig, ParamSet};

fn main() -> ossem::Result<()> {
    let model = ModelConfig::desk();
    let params = ParamSet::<f32>::init(&model, 5)?;
    let stft = Stft::new(StftConfig::new(256, 128))?;
    let emb: Vec<f32> = (0..192).map(|i| if i % 2 == 0 { 0.07 } else { -0.07 }).collect();
    let noisy: Vec<f32> = (0..24_000).map(|n| 0.2 * ((n as f32) * 0.05).sin() + 0.05 * ((n * 7919 % 101) as f32 / 50.0 - 1.0)).collect();

    let batch = enhance_wave(&params, &model, &emb, &stft, &noisy)?;

    let mut stream = StreamEnhancer::new(&params, &model, &emb, &stft)?;
    let mut out = Vec::new();
    let start = Instant::now();
    for chunk in noisy.chunks(160) {
        stream.push(chunk, &mut out)?;
    }
    let frames = stream.frames();
    stream.finish(&mut out)?;
    let per_frame = start.elapsed().as_secs_f64() / frames.max(1) as f64;

    let identical = batch.len() == out.len() && batch.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("bitwise identical: {identical}");
    println!("{:.3} ms per frame against an 8 ms hop", per_frame * 1e3);
    Ok(())
}
