use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ossem_forward_tape, Bound, ModelConfig, ParamSet};
use crate::autodiff::{grad_check_subset, GradCheckReport, Tensor};
use crate::error::Result;

/// Finite-difference check of the full model's L1 loss gradient for random
/// parameters, input, target and embedding drawn from `seed`.
///
/// At most `per_param` elements of each tensor are probed. A draw whose L1
/// residuals sit too close to the kink is replaced by the next one.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, frames: usize, per_param: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let ps = ParamSet::<f64>::init(cfg, seed)?;
    let named: Vec<(String, Tensor<f64>)> = ps.iter().map(|p| (p.name().to_string(), p.tensor.clone())).collect();
    let f = cfg.freq_bins;
    let mut last = None;
    for attempt in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(attempt));
        let x = Tensor::new(vec![frames, f], (0..frames * f).map(|_| rng.random_range(0.05..1.5)).collect())?;
        let y = Tensor::new(vec![frames, f], (0..frames * f).map(|_| rng.random_range(0.05..1.5)).collect())?;
        let e: Vec<f64> = (0..cfg.emb_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = Tensor::new(vec![1, cfg.emb_dim], e.iter().map(|v| v / norm).collect())?;
        let report = grad_check_subset(
            |tape, vars| {
                let bound = Bound::from_vars(&ps, vars.to_vec());
                let ev = tape.constant(e.clone());
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let out = ossem_forward_tape(tape, &bound, cfg, Some(ev), xv)?;
                tape.l1_mean_loss(out.out, yv)
            },
            &named,
            1e-6,
            1e-5,
            per_param,
            seed,
        )?;
        if report.skipped.is_none() {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}
