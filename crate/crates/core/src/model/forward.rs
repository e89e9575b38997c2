use super::{ModelConfig, ParamSet, Partition, Placement, Site};
use super::params::Bound;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::speaker::SpeakerEmbedding;

/// Per-frequency (or per-channel) gain in `(0, 1)`, constant across time.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T>(pub Vec<T>);

impl<T: Real> Mask<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Handles into a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Enhanced magnitude `[T, F]`.
    pub out: Var,
    /// Mask `[1, W]`, absent for [`Placement::Non`].
    pub mask: Option<Var>,
}

/// Records the SSM network on `tape`; `emb` is `[1, emb_dim]`.
pub fn ssm_forward_tape<T: Real>(tape: &mut Tape<T>, p: &Bound, emb: Var) -> Result<Var> {
    let mut h = emb;
    for l in 0..3 {
        h = tape.linear(h, p.var(&format!("ssm.l{l}.w"))?, p.var(&format!("ssm.l{l}.b"))?)?;
        h = if l < 2 { tape.leaky_relu(h)? } else { tape.sigmoid(h)? };
    }
    Ok(h)
}

fn at_site<T: Real>(tape: &mut Tape<T>, x: Var, mask: Option<Var>, placement: Placement, site: Site) -> Result<Var> {
    match mask {
        Some(m) if placement.is_active(site) => {
            let (w, xw) = (tape.value(m).len(), tape.value(x).cols());
            if w != xw {
                return Err(Error::shape("apply_mask", format!("mask width {w} at a site of width {xw}")));
            }
            tape.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Records the full network. `emb` is required unless the placement is
/// [`Placement::Non`]; the enhancer alone runs when it is `None`.
pub fn ossem_forward_tape<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    emb: Option<Var>,
    x: Var,
) -> Result<Forward> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 || xv.cols() != cfg.freq_bins {
        return Err(Error::shape("se_forward", format!("input {:?}, expected [T, {}]", xv.shape(), cfg.freq_bins)));
    }
    let mask = match (cfg.placement, emb) {
        (Placement::Non, _) | (_, None) => None,
        (_, Some(e)) => {
            let ev = tape.value(e);
            if ev.len() != cfg.emb_dim {
                return Err(Error::shape(
                    "ssm_forward",
                    format!("embedding has {} dimensions, expected {}", ev.len(), cfg.emb_dim),
                ));
            }
            Some(ssm_forward_tape(tape, p, e)?)
        }
    };
    let pl = cfg.placement;
    let eps = T::of(cfg.ln_eps);

    let x_in = at_site(tape, x, mask, pl, Site::EncoderIn)?;
    let mut h = x_in;
    for l in 0..cfg.conv_layers {
        h = tape.causal_conv1d(h, p.var(&format!("se.conv{l}.w"))?, p.var(&format!("se.conv{l}.b"))?)?;
        h = tape.leaky_relu(h)?;
    }
    h = at_site(tape, h, mask, pl, Site::AttentionIn)?;
    for b in 0..cfg.blocks {
        let v = |n: &str| p.var(&format!("se.block{b}.{n}"));
        let q = tape.linear(h, v("wq")?, v("bq")?)?;
        let k = tape.linear(h, v("wk")?, v("bk")?)?;
        let vv = tape.linear(h, v("wv")?, v("bv")?)?;
        let a = tape.attention(q, k, vv, cfg.heads, cfg.causal)?;
        let o = tape.linear(a, v("wo")?, v("bo")?)?;
        let r = tape.add(h, o)?;
        h = tape.layer_norm(r, v("ln1.g")?, v("ln1.b")?, eps)?;
        let f = tape.linear(h, v("ff1.w")?, v("ff1.b")?)?;
        let f = tape.relu(f)?;
        let f = tape.linear(f, v("ff2.w")?, v("ff2.b")?)?;
        let r = tape.add(h, f)?;
        h = tape.layer_norm(r, v("ln2.g")?, v("ln2.b")?, eps)?;
    }
    h = at_site(tape, h, mask, pl, Site::DecoderIn)?;
    let g = tape.linear(h, p.var("se.dec.w")?, p.var("se.dec.b")?)?;
    let g = tape.relu(g)?;
    let g = at_site(tape, g, mask, pl, Site::DecoderOut)?;
    let out = tape.mul(g, x_in)?;
    Ok(Forward { out, mask })
}

/// Mask for one speaker: `sigmoid(W3 · lrelu(W2 · lrelu(W1 · e + b1) + b2) + b3)`.
pub fn ssm_forward<T: Real>(params: &ParamSet<T>, emb: &[T]) -> Result<Mask<T>> {
    if !params.uses_mask() {
        return Err(Error::invalid("parameter set has no mask network"));
    }
    let e_dim = params.tensor("ssm.l0.w")?.shape()[0];
    if emb.len() != e_dim {
        return Err(Error::shape(
            "ssm_forward",
            format!("embedding has {} dimensions, expected {e_dim}", emb.len()),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let e = tape.constant(Tensor::new(vec![1, emb.len()], emb.to_vec())?);
    let m = ssm_forward_tape(&mut tape, &bound, e)?;
    Ok(Mask(tape.value(m).data().to_vec()))
}

/// Multiplies every row of `x` by `mask` when `site` is the active site of
/// `placement`; otherwise returns `x` unchanged.
pub fn apply_mask<T: Real>(x: &Tensor<T>, mask: &Mask<T>, placement: Placement, site: Site) -> Result<Tensor<T>> {
    if !placement.is_active(site) {
        return Ok(x.clone());
    }
    if mask.len() != x.cols() {
        return Err(Error::shape("apply_mask", format!("mask width {} at a site of width {}", mask.len(), x.cols())));
    }
    let cols = x.cols();
    let data = x.data().iter().enumerate().map(|(i, &v)| v * mask.0[i % cols]).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// The enhancer alone, ignoring any mask network.
pub fn se_forward<T: Real>(params: &ParamSet<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let xv = tape.constant(x.clone());
    let fwd = ossem_forward_tape(&mut tape, &bound, cfg, None, xv)?;
    Ok(tape.value(fwd.out).clone())
}

/// Enhanced magnitude for one utterance.
pub fn enhance_magnitude<T: Real>(params: &ParamSet<T>, cfg: &ModelConfig, emb: &[T], mag: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let e = tape.constant(Tensor::new(vec![1, emb.len()], emb.to_vec())?);
    let x = tape.constant(mag.clone());
    let fwd = ossem_forward_tape(&mut tape, &bound, cfg, Some(e), x)?;
    Ok(tape.value(fwd.out).clone())
}

/// Enhanced spectrogram; the noisy phase is carried over unchanged.
pub fn ossem_forward(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    emb: &SpeakerEmbedding,
    noisy: &Spectrogram,
) -> Result<Spectrogram> {
    let mag = enhance_magnitude(params, cfg, emb.as_slice(), &noisy.mag)?;
    noisy.with_mag(mag)
}

impl<T: Real> ParamSet<T> {
    /// Partitions updated by gradient steps on this set.
    pub fn partitions(&self) -> Vec<Partition> {
        if self.uses_mask() {
            vec![Partition::Ssm, Partition::Se]
        } else {
            vec![Partition::Se]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels::leaky_relu;
    use crate::autodiff::{grad_check, LEAKY_SLOPE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(t: usize, f: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, f], (0..t * f).map(|_| rng.random_range(0.05..1.5)).collect()).unwrap()
    }

    fn random_emb(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.2..0.2)).collect()
    }

    /// Independent scalar-loop forward used as an oracle.
    mod oracle {
        use super::*;

        pub fn dense(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
            let (i_n, o_n) = (w.shape()[0], w.shape()[1]);
            (0..o_n)
                .map(|o| b.data()[o] + (0..i_n).map(|i| x[i] * w.data()[i * o_n + o]).sum::<f64>())
                .collect()
        }

        pub fn ssm(ps: &ParamSet<f64>, e: &[f64]) -> Vec<f64> {
            let mut h = e.to_vec();
            for l in 0..3 {
                let w = ps.tensor(&format!("ssm.l{l}.w")).unwrap();
                let b = ps.tensor(&format!("ssm.l{l}.b")).unwrap();
                h = dense(&h, w, b);
                h = h
                    .iter()
                    .map(|&v| if l < 2 { leaky_relu(v, LEAKY_SLOPE) } else { 1.0 / (1.0 + (-v).exp()) })
                    .collect();
            }
            h
        }

        pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(i, a)| (a - m) / (v + eps).sqrt() * g[i] + b[i]).collect()
        }

        pub fn se(ps: &ParamSet<f64>, cfg: &ModelConfig, x: &[Vec<f64>], mask: Option<&[f64]>) -> Vec<Vec<f64>> {
            let t_n = x.len();
            let site = |h: Vec<Vec<f64>>, s: Site| -> Vec<Vec<f64>> {
                match mask {
                    Some(m) if cfg.placement.is_active(s) => {
                        h.into_iter().map(|r| r.iter().zip(m).map(|(a, b)| a * b).collect()).collect()
                    }
                    _ => h,
                }
            };
            let x_in = site(x.to_vec(), Site::EncoderIn);
            let mut h = x_in.clone();
            for l in 0..cfg.conv_layers {
                let w = ps.tensor(&format!("se.conv{l}.w")).unwrap();
                let b = ps.tensor(&format!("se.conv{l}.b")).unwrap();
                let (k, ci, co) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                h = (0..t_n)
                    .map(|t| {
                        (0..co)
                            .map(|o| {
                                let mut s = b.data()[o];
                                for j in 0..k {
                                    let src = t as isize - (k as isize - 1) + j as isize;
                                    if src < 0 {
                                        continue;
                                    }
                                    for (c, &hv) in h[src as usize][..ci].iter().enumerate() {
                                        s += hv * w.data()[(j * ci + c) * co + o];
                                    }
                                }
                                leaky_relu(s, LEAKY_SLOPE)
                            })
                            .collect()
                    })
                    .collect();
            }
            h = site(h, Site::AttentionIn);
            let d = cfg.d_model;
            let hd = d / cfg.heads;
            for blk in 0..cfg.blocks {
                let p = |n: &str| ps.tensor(&format!("se.block{blk}.{n}")).unwrap();
                let proj = |h: &Vec<Vec<f64>>, w: &str, b: &str| -> Vec<Vec<f64>> {
                    h.iter().map(|r| dense(r, p(w), p(b))).collect()
                };
                let (q, k, v) = (proj(&h, "wq", "bq"), proj(&h, "wk", "bk"), proj(&h, "wv", "bv"));
                let mut a = vec![vec![0.0; d]; t_n];
                for t in 0..t_n {
                    let last = if cfg.causal { t } else { t_n - 1 };
                    for head in 0..cfg.heads {
                        let r = head * hd..(head + 1) * hd;
                        let scores: Vec<f64> = (0..=last)
                            .map(|j| {
                                q[t][r.clone()].iter().zip(&k[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let z: f64 = scores.iter().map(|s| s.exp()).sum();
                        for (j, s) in scores.iter().enumerate() {
                            for c in r.clone() {
                                a[t][c] += s.exp() / z * v[j][c];
                            }
                        }
                    }
                }
                let o = proj(&a, "wo", "bo");
                h = (0..t_n)
                    .map(|t| {
                        let r: Vec<f64> = h[t].iter().zip(&o[t]).map(|(x, y)| x + y).collect();
                        layer_norm(&r, p("ln1.g").data(), p("ln1.b").data(), cfg.ln_eps)
                    })
                    .collect();
                h = (0..t_n)
                    .map(|t| {
                        let f1: Vec<f64> = dense(&h[t], p("ff1.w"), p("ff1.b")).into_iter().map(|v| v.max(0.0)).collect();
                        let f2 = dense(&f1, p("ff2.w"), p("ff2.b"));
                        let r: Vec<f64> = h[t].iter().zip(&f2).map(|(x, y)| x + y).collect();
                        layer_norm(&r, p("ln2.g").data(), p("ln2.b").data(), cfg.ln_eps)
                    })
                    .collect();
            }
            h = site(h, Site::DecoderIn);
            let mut g: Vec<Vec<f64>> = h
                .iter()
                .map(|r| {
                    dense(r, ps.tensor("se.dec.w").unwrap(), ps.tensor("se.dec.b").unwrap())
                        .into_iter()
                        .map(|v| v.max(0.0))
                        .collect()
                })
                .collect();
            g = site(g, Site::DecoderOut);
            g.iter().zip(&x_in).map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).collect()).collect()
        }
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn zero_ssm_gives_half() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamSet::<f64>::init(&cfg, 0).unwrap();
        for p in ps.iter_mut().filter(|p| p.partition() == Partition::Ssm) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let m = ssm_forward(&ps, &random_emb(192, 1)).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.5));
        ps.tensor_mut("ssm.l2.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 20.0);
        let m = ssm_forward(&ps, &random_emb(192, 1)).unwrap();
        assert!(m.as_slice().iter().all(|&v| (1.0 - 1e-8..1.0).contains(&v)));
        assert!(ssm_forward(&ps, &random_emb(191, 1)).is_err());
    }

    #[test]
    fn ssm_matches_scalar_oracle() {
        for p in [Placement::Pre, Placement::Mid1] {
            let cfg = ModelConfig { placement: p, ..ModelConfig::tiny() };
            let ps = ParamSet::<f64>::init(&cfg, 3).unwrap();
            let e = random_emb(192, 4);
            let m = ssm_forward(&ps, &e).unwrap();
            let want = oracle::ssm(&ps, &e);
            assert_eq!(m.len(), cfg.mask_width().unwrap());
            for (a, b) in m.as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
        let cfg = ModelConfig::tiny();
        let ps32 = ParamSet::<f64>::init(&cfg, 3).unwrap().cast::<f32>();
        let e = random_emb(192, 4);
        let m32 = ssm_forward(&ps32, &e.iter().map(|&v| v as f32).collect::<Vec<_>>()).unwrap();
        let want = oracle::ssm(&ps32.cast::<f64>(), &e);
        for (a, b) in m32.as_slice().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn apply_mask_contract() {
        let x = random_input(3, 5, 1);
        let half = Mask(vec![0.5; 5]);
        for s in Site::ALL {
            assert_eq!(apply_mask(&x, &half, Placement::Non, s).unwrap(), x);
        }
        let y = apply_mask(&x, &half, Placement::Pre, Site::EncoderIn).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert_eq!(apply_mask(&x, &half, Placement::Mid2, Site::EncoderIn).unwrap(), x);
        assert!(apply_mask(&x, &Mask(vec![0.5; 4]), Placement::Pre, Site::EncoderIn).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamSet::<f64>::init(&cfg, 5).unwrap();
        for p in ps.iter_mut() {
            if p.tensor.shape().len() == 1 && !p.name().ends_with(".g") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y = se_forward(&ps, &cfg, &Tensor::zeros(&[6, 33])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_matches_layerwise_oracle() {
        for causal in [true, false] {
            let cfg = ModelConfig {
                causal,
                placement: Placement::Non,
                ..ModelConfig::tiny()
            };
            let ps = ParamSet::<f64>::init(&cfg, 7).unwrap();
            let x = random_input(7, 33, 8);
            let y = se_forward(&ps, &cfg, &x).unwrap();
            let want = oracle::se(&ps, &cfg, &rows(&x), None);
            for (t, row) in want.iter().enumerate() {
                for (a, b) in y.row(t).iter().zip(row) {
                    assert!((a - b).abs() < 1e-5, "causal={causal} t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn every_placement_matches_oracle() {
        for p in Placement::ALL {
            let cfg = ModelConfig { placement: p, ..ModelConfig::tiny() };
            let ps = ParamSet::<f64>::init(&cfg, 9).unwrap();
            let x = random_input(5, 33, 10);
            let e = random_emb(192, 11);
            let y = enhance_magnitude(&ps, &cfg, &e, &x).unwrap();
            let mask = (p != Placement::Non).then(|| oracle::ssm(&ps, &e));
            let want = oracle::se(&ps, &cfg, &rows(&x), mask.as_deref());
            for (t, row) in want.iter().enumerate() {
                for (a, b) in y.row(t).iter().zip(row) {
                    assert!((a - b).abs() < 1e-9, "{p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn causal_future_frames_do_not_leak() {
        let cfg = ModelConfig::tiny();
        let ps = ParamSet::<f32>::init(&cfg, 12).unwrap();
        let x = random_input(9, 33, 13).cast::<f32>();
        let e: Vec<f32> = random_emb(192, 14).iter().map(|&v| v as f32).collect();
        let y = enhance_magnitude(&ps, &cfg, &e, &x).unwrap();
        let t = 4;
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[(t + 1) * 33..] {
            *v += 0.7;
        }
        let y2 = enhance_magnitude(&ps, &cfg, &e, &x2).unwrap();
        assert_eq!(&y.data()[..(t + 1) * 33], &y2.data()[..(t + 1) * 33]);
        assert_ne!(&y.data()[(t + 1) * 33..], &y2.data()[(t + 1) * 33..]);
    }

    #[test]
    fn non_equals_bare_enhancer_and_saturated_pre_is_identity() {
        let cfg = ModelConfig { placement: Placement::Non, ..ModelConfig::tiny() };
        let ps = ParamSet::<f64>::init(&cfg, 15).unwrap();
        let x = random_input(4, 33, 16);
        let e = random_emb(192, 17);
        assert_eq!(enhance_magnitude(&ps, &cfg, &e, &x).unwrap(), se_forward(&ps, &cfg, &x).unwrap());

        let cfg = ModelConfig::tiny();
        let mut ps = ParamSet::<f64>::init(&cfg, 15).unwrap();
        ps.tensor_mut("ssm.l2.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 40.0);
        let y = enhance_magnitude(&ps, &cfg, &e, &x).unwrap();
        let bare = se_forward(&ps, &cfg, &x).unwrap();
        for (a, b) in y.data().iter().zip(bare.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_changes_mask() {
        let cfg = ModelConfig::tiny();
        let ps = ParamSet::<f32>::init(&cfg, 18).unwrap();
        let a: Vec<f32> = random_emb(192, 19).iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = random_emb(192, 20).iter().map(|&v| v as f32).collect();
        assert_ne!(ssm_forward(&ps, &a).unwrap(), ssm_forward(&ps, &b).unwrap());
    }

    #[test]
    fn phase_passes_through() {
        let cfg = ModelConfig::tiny();
        let ps = ParamSet::<f32>::init(&cfg, 21).unwrap();
        let stft = crate::features::Stft::new(crate::features::StftConfig::new(64, 32)).unwrap();
        let wave: Vec<f32> = (0..800).map(|i| ((i as f32) * 0.37).sin() * 0.3).collect();
        let noisy = stft.stft(&wave).unwrap();
        let emb = SpeakerEmbedding::new("s", random_emb(192, 22).iter().map(|&v| v as f32).collect()).unwrap();
        let out = ossem_forward(&ps, &cfg, &emb, &noisy).unwrap();
        assert_eq!(out.phase, noisy.phase);
        assert_eq!(out.mag.shape(), noisy.mag.shape());
    }

    #[test]
    fn full_pipeline_gradients() {
        let cfg = ModelConfig {
            freq_bins: 9,
            ssm_hidden: [5, 4],
            emb_dim: 6,
            d_model: 8,
            heads: 2,
            ff_dim: 6,
            ..ModelConfig::tiny()
        };
        for placement in Placement::ALL {
            let cfg = ModelConfig { placement, ..cfg.clone() };
            let ps = ParamSet::<f64>::init(&cfg, 23).unwrap();
            let x = random_input(4, 9, 24);
            let y = random_input(4, 9, 25);
            let e = Tensor::new(vec![1, 6], random_emb(6, 26)).unwrap();
            let names: Vec<(String, Tensor<f64>)> = ps.iter().map(|p| (p.name().to_string(), p.tensor.clone())).collect();
            let template = ps.clone();
            let report = grad_check(
                |tape, vars| {
                    let mut local = template.clone();
                    for (p, v) in local.iter_mut().zip(vars) {
                        p.tensor = tape.value(*v).clone();
                    }
                    let bound = Bound::from_vars(&local, vars.to_vec());
                    let ev = tape.constant(e.clone());
                    let xv = tape.constant(x.clone());
                    let yv = tape.constant(y.clone());
                    let f = ossem_forward_tape(tape, &bound, &cfg, Some(ev), xv)?;
                    tape.l1_mean_loss(f.out, yv)
                },
                &names,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{placement}\n{report}");
        }
    }
}
