//! The same input enhanced by an untrained model with the speaker mask at
//! each placement.

use ossem::autodiff::Tensor;
use ossem::model::{enhance_magnitude, ssm_forward, ModelConfig, ParamSet, Placement};

fn main() -> ossem::Result<()> {
    let emb: Vec<f32> = (0..192).map(|i| ((i * 7 % 13) as f32 - 6.0) / 40.0).collect();
    let mag = Tensor::new(vec![20, 33], (0..660).map(|i| 0.5 + 0.4 * ((i as f32) * 0.37).sin()).collect())?;
    for placement in Placement::ALL {
        let cfg = ModelConfig { placement, ..ModelConfig::tiny() };
        let params = ParamSet::<f32>::init(&cfg, 3)?;
        let out = enhance_magnitude(&params, &cfg, &emb, &mag)?;
        let mean = out.data().iter().sum::<f32>() / out.len() as f32;
        let mask = if params.uses_mask() {
            let m = ssm_forward(&params, &emb)?.0;
            format!("mask width {:>2}, first gains {:.3?}", m.len(), &m[..3])
        } else {
            "no mask network".to_string()
        };
        println!("{placement:<5} params {:>6}  mean output {mean:.4}  {mask}", params.iter().map(|p| p.tensor.len()).sum::<usize>());
    }
    Ok(())
}
