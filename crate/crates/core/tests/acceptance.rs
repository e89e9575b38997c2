//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ossem::adapt::{enhance_stream, enhance_wave, one_shot_adapt, AdaptOptions, EnrollmentSet};
use ossem::autodiff::{Tape, Tensor, Var};
use ossem::checkpoint::{Checkpoint, Provenance};
use ossem::config::RunConfig;
use ossem::corpus::{export_masks, gen_corpus};
use ossem::features::{rescale_ratio, Spectrogram, Stft, StftConfig};
use ossem::meta::{
    ilr_schedule, inner_adapt, loss_and_grads, meta_train, outer_step, supervised_pretrain, Batching, Learner,
    Optimizer, OssemLearner, PretrainConfig, Rescale, RescaleSide, Sample, SpeakerData, Techniques, TrainConfig,
    TrainSet, Utterance,
};
use ossem::model::{enhance_magnitude, model_grad_check, Bound, ModelConfig, ParamSet, Partition, Placement};
use ossem::pipeline::{self, AblationTable, Prepared};
use ossem::speaker::SpeakerEmbedding;

const FIXTURE: &str = "tests/fixtures/desk.json";

/// Values recorded from the first verified desk run.
#[derive(Debug, Serialize, Deserialize)]
struct DeskFixture {
    mean_noisy_si_sdr: f64,
    mean_unadapted_si_sdr: f64,
    mean_adapted_si_sdr: f64,
    mean_delta_si_sdr: f64,
    mask_centroid_distance: f64,
    mask_within_spread: f64,
}

struct Desk {
    _dir: tempfile::TempDir,
    prep: Prepared,
    theta: ParamSet<f32>,
    measured: DeskFixture,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_mag(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(0.01f32..2.0)).collect()).unwrap()
}

fn unit_embedding(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let e: Vec<f32> = (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = e.iter().map(|v| v * v).sum::<f32>().sqrt();
    e.iter().map(|v| v / n).collect()
}

fn bits<T: ossem::autodiff::Real>(t: &Tensor<T>, rows: usize) -> Vec<u64> {
    t.data()[..rows * t.cols()].iter().map(|v| v.as_f64().to_bits()).collect()
}

fn perturb_after<T: ossem::autodiff::Real>(x: &Tensor<T>, t: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut y = x.clone();
    let c = y.cols();
    for v in &mut y.data_mut()[(t + 1) * c..] {
        *v = T::of(v.as_f64() + rng.random_range(0.1..3.0));
    }
    y
}

fn gradients() -> Result<String> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut probed = 0;
    for (seed, placement) in (1u64..).zip(Placement::ALL) {
        let cfg = ModelConfig {
            placement,
            ..ModelConfig::desk()
        };
        let report = model_grad_check(&cfg, seed, 4, 256)?;
        ensure!(report.passed(), "seed {seed} ({placement}) failed:\n{report}");
        let n_params = ParamSet::<f64>::init(&cfg, seed)?.len();
        ensure!(report.params.len() == n_params, "seed {seed}: only {} of {n_params} tensors checked", report.params.len());
        worst = worst.max(report.max_rel_err());
        probed += report.params.iter().map(|p| p.elements).sum::<usize>();
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}");
    Ok(format!("5 desk models, {probed} elements, max rel err {worst:.2e}, {elapsed:.1?}"))
}

fn causality() -> Result<String> {
    let mut r = rng(2);
    let stft = Stft::new(StftConfig::new(256, 128))?;
    for trial in 0..100 {
        let frames = r.random_range(3..12);
        let t = r.random_range(0..frames - 1);

        let (c_in, c_out, k) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..5));
        let x = random_tensor(&mut r, frames, c_in, -2.0, 2.0);
        let w = Tensor::new(vec![k, c_in, c_out], (0..k * c_in * c_out).map(|_| r.random_range(-1.0..1.0)).collect())?;
        let b = Tensor::from_vec((0..c_out).map(|_| r.random_range(-1.0..1.0)).collect())?;
        let conv = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.causal_conv1d(xv, wv, bv)?;
            Ok(tape.value(y).clone())
        };
        let y = perturb_after(&x, t, &mut r);
        ensure!(bits(&conv(&x)?, t + 1) == bits(&conv(&y)?, t + 1), "trial {trial}: conv leaks the future");

        let heads = r.random_range(1..4);
        let d = heads * r.random_range(1..5);
        let (q, kk, v) = (
            random_tensor(&mut r, frames, d, -2.0, 2.0),
            random_tensor(&mut r, frames, d, -2.0, 2.0),
            random_tensor(&mut r, frames, d, -2.0, 2.0),
        );
        let attend = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let y = tape.attention(qv, kv, vv, heads, true)?;
            Ok(tape.value(y).clone())
        };
        let (q2, k2, v2) = (perturb_after(&q, t, &mut r), perturb_after(&kk, t, &mut r), perturb_after(&v, t, &mut r));
        ensure!(
            bits(&attend(&q, &kk, &v)?, t + 1) == bits(&attend(&q2, &k2, &v2)?, t + 1),
            "trial {trial}: attention leaks the future"
        );

        let cfg = ModelConfig {
            placement: Placement::ALL[trial % 5],
            ..ModelConfig::desk()
        };
        let ps = ParamSet::<f32>::init(&cfg, trial as u64)?;
        let emb = unit_embedding(&mut r);
        let mag = random_mag(&mut r, frames, cfg.freq_bins);
        let a = enhance_magnitude(&ps, &cfg, &emb, &mag)?;
        let b = enhance_magnitude(&ps, &cfg, &emb, &perturb_after(&mag, t, &mut r))?;
        ensure!(bits(&a, t + 1) == bits(&b, t + 1), "trial {trial}: model ({}) leaks the future", cfg.placement);

        let wave: Vec<f32> = (0..r.random_range(600..3000)).map(|_| r.random_range(-0.5f32..0.5)).collect();
        let batch = enhance_wave(&ps, &cfg, &emb, &stft, &wave)?;
        let stream = enhance_stream(&ps, &cfg, &emb, &stft, &wave, r.random_range(1..400))?;
        ensure!(
            batch.len() == stream.len() && batch.iter().zip(&stream).all(|(a, b)| a.to_bits() == b.to_bits()),
            "trial {trial}: streaming differs from batch"
        );
    }
    Ok("100 trials: conv, attention, model and streaming".into())
}

fn partitions() -> Result<String> {
    let mut r = rng(3);
    let cfg = ModelConfig::desk();
    let learner = OssemLearner::new(cfg.clone());
    let mut moved = 0;
    for trial in 0..50u64 {
        let theta = ParamSet::<f32>::init(&cfg, 100 + trial)?;
        let frames = r.random_range(2..10);
        let utt = Utterance {
            id: "u".into(),
            noisy: random_mag(&mut r, frames, cfg.freq_bins),
            clean: random_mag(&mut r, frames, cfg.freq_bins),
        };
        let emb = unit_embedding(&mut r);
        let ilr = 10f32.powf(r.random_range(-3.0..0.0));
        let steps = r.random_range(1..3);
        let rescale = r.random_bool(0.5);
        let mode = if rescale { Rescale::On(RescaleSide::Output) } else { Rescale::Off };

        let support = [Sample { emb: &emb, utt: &utt }];
        let inner = inner_adapt(&learner, &theta, &support, ilr, steps, true, mode)?.params;
        let enroll = EnrollmentSet {
            speaker_id: "s".into(),
            pairs: vec![utt.clone()],
            embedding: SpeakerEmbedding::new("s", emb.clone())?,
        };
        let opts = AdaptOptions {
            ilr: ilr as f64,
            steps,
            feature_rescale: rescale,
        };
        let online = one_shot_adapt(&theta, &cfg, &enroll, opts)?;

        let se = theta.partition_hash(Partition::Se);
        let ssm = theta.partition_hash(Partition::Ssm);
        for (name, adapted) in [("inner_adapt", &inner), ("one_shot_adapt", &online)] {
            ensure!(adapted.partition_hash(Partition::Se) == se, "trial {trial}: {name} changed the SE partition");
            if adapted.partition_hash(Partition::Ssm) != ssm {
                moved += 1;
            }
        }
    }
    ensure!(moved == 100, "SSM partition moved in only {moved} of 100 adaptations");
    Ok("50 trials: SE bitwise fixed, SSM moved in every adaptation".into())
}

fn schedule() -> Result<String> {
    for epochs in [26, 30, 60, 100, 250] {
        let v: Vec<f64> = (1..=epochs).map(|e| ilr_schedule(e, epochs, 1e-3)).collect::<ossem::Result<_>>()?;
        ensure!(v[..5].iter().all(|&x| x == 0.0), "{epochs}: nonzero in epochs 1-5");
        ensure!(v.windows(2).all(|w| w[1] >= w[0]), "{epochs}: decreasing");
        ensure!(v[epochs - 20..].iter().all(|&x| x == 1e-3), "{epochs}: final 20 epochs not at peak");
    }
    let got = ilr_schedule(42, 100, 1e-3)?;
    let want = 1e-3 * (42.0 - 5.0) / (100.0 - 25.0);
    ensure!((got - want).abs() <= 1e-12, "epoch 42/100 gave {got}, expected {want}");
    Ok(format!("epoch 42/100 = {got:.12e}"))
}

fn synthetic_train_set(seed: u64, model: &ModelConfig) -> TrainSet {
    let mut r = rng(seed);
    TrainSet {
        speakers: (0..3)
            .map(|s| SpeakerData {
                speaker_id: format!("s{s}"),
                embedding: unit_embedding(&mut r),
                utterances: (0..6)
                    .map(|u| {
                        let frames = r.random_range(4..9);
                        Utterance {
                            id: format!("s{s}u{u}"),
                            noisy: random_mag(&mut r, frames, model.freq_bins),
                            clean: random_mag(&mut r, frames, model.freq_bins),
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn reduction() -> Result<String> {
    let model = ModelConfig::tiny();
    let learner = OssemLearner::new(model.clone());
    let data = synthetic_train_set(5, &model);
    let init = ParamSet::<f32>::init(&model, 5)?;
    let meta = TrainConfig {
        epochs: 4,
        iterations_per_epoch: 25,
        olr: 1e-2,
        ilr_peak: 0.0,
        n_support: 1,
        n_query: 3,
        techniques: Techniques {
            ilr_schedule: false,
            ..Techniques::default()
        },
        seed: 9,
        ..TrainConfig::default()
    };
    let sup = PretrainConfig {
        epochs: 4,
        iterations_per_epoch: 25,
        lr: 1e-2,
        batch_size: 3,
        optimizer: Optimizer::Sgd,
        batching: Batching::PerSpeaker,
        seed: 9,
    };
    let (a, _) = meta_train(&meta, &learner, &data, init.clone(), |_| {})?;
    let (b, _) = supervised_pretrain(&sup, &learner, &data, init.clone(), |_| {})?;
    let mut worst = 0.0f64;
    for (p, q) in a.iter().zip(b.iter()) {
        ensure!(p.name() == q.name(), "parameter order differs");
        for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    let drift = a
        .iter()
        .zip(init.iter())
        .flat_map(|(p, q)| p.tensor.data().iter().zip(q.tensor.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f32, f32::max);
    ensure!(drift > 1e-4, "training did not move the parameters");
    ensure!(worst <= 1e-7, "max parameter difference {worst:.3e}");
    Ok(format!("100 steps, max parameter difference {worst:.1e}"))
}

fn rescaling() -> Result<String> {
    let spec = |mag: Vec<f32>| Spectrogram {
        mag: Tensor::matrix(2, 2, mag).unwrap(),
        phase: vec![0.0; 4],
        frame_len: 2,
        hop: 1,
        sample_rate: 16_000,
        n_samples: 2,
    };
    let alpha = rescale_ratio(&spec(vec![1.0, 2.0, 3.0, 4.0]), &spec(vec![2.0; 4]))?.alpha();
    ensure!(alpha == 1.875, "hand case gave {alpha}");

    let model = ModelConfig::tiny();
    let learner = OssemLearner::new(model.clone());
    let theta = ParamSet::<f32>::init(&model, 6)?;
    let mut r = rng(6);
    let emb = unit_embedding(&mut r);
    let noisy = random_mag(&mut r, 6, model.freq_bins);
    let grads = |clean: &Tensor<f32>, mode| -> Result<Vec<f32>> {
        let utt = Utterance {
            id: "u".into(),
            noisy: noisy.clone(),
            clean: clean.clone(),
        };
        let (_, g) = loss_and_grads(&learner, &theta, &[Sample { emb: &emb, utt: &utt }], &[Partition::Ssm], mode)?;
        Ok(g.into_iter().flatten().flatten().collect())
    };
    let on = Rescale::On(RescaleSide::Output);
    let louder = noisy.map(|v| 3.0 * v);
    ensure!(grads(&louder, Rescale::Off)? != grads(&louder, on)?, "alpha = 9 left the inner gradient unchanged");
    let same = grads(&noisy, Rescale::Off)?.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        == grads(&noisy, on)?.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(same, "alpha = 1 changed the inner gradient");
    Ok("alpha 1.875 exact; alpha 9 changes the gradient, alpha 1 is bitwise inert".into())
}

/// `mean_i (a · b · x_i − y_i)²` with `a` adapted in the inner loop and `b`
/// in the enhancer partition.
struct Bilinear;

impl Learner<f64, (f64, f64)> for Bilinear {
    fn loss(&self, tape: &mut Tape<f64>, p: &Bound, ex: &[(f64, f64)], _: Rescale) -> ossem::Result<Var> {
        let ab = tape.mul(p.var("a")?, p.var("b")?)?;
        let x = tape.constant(Tensor::from_vec(ex.iter().map(|e| e.0).collect())?);
        let y = tape.constant(Tensor::from_vec(ex.iter().map(|e| e.1).collect())?);
        let pred = tape.mul(x, ab)?;
        let res = tape.sub(pred, y)?;
        let sq = tape.mul(res, res)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 1.0 / ex.len() as f64)
    }
}

fn fomaml() -> Result<String> {
    let (a0, b0, ilr, olr) = (0.8, -0.6, 0.07, 0.03);
    let support = [(1.2, 0.5), (-0.4, 0.9)];
    let query = [(0.3, -1.0), (2.0, 0.2), (-1.1, 0.7)];
    let mut ps = ParamSet::new();
    ps.push("a", Partition::Ssm, Tensor::scalar(a0))?;
    ps.push("b", Partition::Se, Tensor::scalar(b0))?;

    // Inner: dL/da = mean 2(abx − y)·bx, with b frozen.
    let ga_s: f64 = support.iter().map(|&(x, y)| 2.0 * (a0 * b0 * x - y) * b0 * x).sum::<f64>() / 2.0;
    let a1 = a0 - ilr * ga_s;
    // Outer: query gradient at (a1, b0) applied to (a0, b0).
    let (mut ga, mut gb) = (0.0, 0.0);
    for &(x, y) in &query {
        let res = a1 * b0 * x - y;
        ga += 2.0 * res * b0 * x / 3.0;
        gb += 2.0 * res * a1 * x / 3.0;
    }
    let want = (a0 - olr * ga, b0 - olr * gb);

    let adapted = inner_adapt(&Bilinear, &ps, &support, ilr, 1, true, Rescale::Off)?;
    let mut theta = ps.clone();
    outer_step(&Bilinear, &mut theta, &adapted.params, &query, olr)?;
    let got = (theta.tensor("a")?.item(), theta.tensor("b")?.item());
    let err = (got.0 - want.0).abs().max((got.1 - want.1).abs());
    ensure!(err <= 1e-10, "got {got:?}, expected {want:?}");
    Ok(format!("max error {err:.1e}"))
}

fn mask_separation(prep: &Prepared, theta: &ParamSet<f32>) -> Result<(f64, f64, f64)> {
    let rows = prep
        .corpus
        .manifest
        .speakers
        .iter()
        .map(|s| (s.speaker_id.as_str(), s.gender.as_str(), &prep.embeddings[&s.speaker_id]));
    let csv = export_masks(theta, rows)?;
    let mut groups: std::collections::BTreeMap<String, Vec<Vec<f64>>> = Default::default();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for line in csv.lines() {
        let f: Vec<&str> = line.split(',').collect();
        let vals: Vec<f64> = f[2..].iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
        let mask = vals[..vals.len() / 2].to_vec();
        lo = lo.min(mask.iter().copied().fold(f64::INFINITY, f64::min));
        hi = hi.max(mask.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        groups.entry(f[1].to_string()).or_default().push(mask);
    }
    ensure!(lo > 0.0 && hi < 1.0, "mask values span [{lo}, {hi}]");
    ensure!(groups.len() == 2, "expected two gender groups, found {:?}", groups.keys());
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let centroid = |ms: &[Vec<f64>]| -> Vec<f64> {
        (0..ms[0].len()).map(|i| ms.iter().map(|m| m[i]).sum::<f64>() / ms.len() as f64).collect()
    };
    let gs: Vec<&Vec<Vec<f64>>> = groups.values().collect();
    let (c0, c1) = (centroid(gs[0]), centroid(gs[1]));
    let spread = gs
        .iter()
        .zip([&c0, &c1])
        .flat_map(|(ms, c)| ms.iter().map(move |m| dist(m, c)))
        .collect::<Vec<_>>();
    let within = spread.iter().sum::<f64>() / spread.len() as f64;
    Ok((dist(&c0, &c1), within, lo))
}

fn train_desk() -> Result<Desk> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig {
        corpus_dir: dir.path().to_path_buf(),
        ..RunConfig::desk()
    }
    .resolve()?;
    let m = gen_corpus(&cfg.corpus, dir.path())?;
    ensure!(m.train_speakers().len() == 8 && m.test_speakers().len() == 2, "unexpected speaker split");
    let prep = Prepared::open(&cfg, cfg.stft)?;
    let theta = pipeline::train(&cfg, &cfg.model, &prep.train_set()?, &mut |_| {})?;
    let report = prep.evaluate(&cfg, &cfg.model, &theta)?;
    let mean = |m: Option<ossem::corpus::Metrics>| m.map(|m| m.si_sdr).ok_or_else(|| anyhow!("no test speakers"));
    let (centroid, within, _) = mask_separation(&prep, &theta)?;
    let measured = DeskFixture {
        mean_noisy_si_sdr: mean(report.mean_noisy)?,
        mean_unadapted_si_sdr: mean(report.mean_unadapted)?,
        mean_adapted_si_sdr: mean(report.mean_adapted)?,
        mean_delta_si_sdr: mean(report.mean_delta)?,
        mask_centroid_distance: centroid,
        mask_within_spread: within,
    };
    Ok(Desk {
        _dir: dir,
        prep,
        theta,
        measured,
    })
}

fn fixture() -> Result<DeskFixture> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<()> {
    ensure!((got - want).abs() <= tol, "{name} {got} differs from the fixture {want}");
    Ok(())
}

fn desk_experiment(desk: &Result<Desk>, elapsed: Duration) -> Result<String> {
    let d = desk.as_ref().map_err(|e| anyhow!("{e:#}"))?;
    let m = &d.measured;
    let gain = m.mean_adapted_si_sdr - m.mean_noisy_si_sdr;
    let summary = format!(
        "noisy {:.3} dB, unadapted {:.3} dB, adapted {:.3} dB, gain {gain:.3} dB, delta {:+.4} dB, {elapsed:.0?}",
        m.mean_noisy_si_sdr, m.mean_unadapted_si_sdr, m.mean_adapted_si_sdr, m.mean_delta_si_sdr
    );
    ensure!(m.mean_delta_si_sdr > 0.0, "adaptation did not help: {summary}");
    ensure!(gain >= 3.0, "gain over noisy below 3 dB: {summary}");
    ensure!(elapsed < Duration::from_secs(30 * 60), "over 30 minutes: {summary}");
    let f = fixture().with_context(|| format!("measured {}", serde_json::to_string(m).unwrap_or_default()))?;
    close("noisy", m.mean_noisy_si_sdr, f.mean_noisy_si_sdr, 1e-6)?;
    close("unadapted", m.mean_unadapted_si_sdr, f.mean_unadapted_si_sdr, 0.05)?;
    close("adapted", m.mean_adapted_si_sdr, f.mean_adapted_si_sdr, 0.05)?;
    close("delta", m.mean_delta_si_sdr, f.mean_delta_si_sdr, 0.005)?;
    Ok(summary)
}

fn masks(desk: &Result<Desk>) -> Result<String> {
    let d = desk.as_ref().map_err(|e| anyhow!("{e:#}"))?;
    let (between, within, _) = mask_separation(&d.prep, &d.theta)?;
    ensure!(between > within, "centroid distance {between:.4} within spread {within:.4}");
    let f = fixture()?;
    close("centroid distance", between, f.mask_centroid_distance, 0.01)?;
    close("within spread", within, f.mask_within_spread, 0.01)?;
    Ok(format!("values in (0,1), gender centroid distance {between:.4} > within-gender spread {within:.4}"))
}

fn ablations() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.json");
    let run = |args: &[&str]| -> Result<()> {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ossem"));
        cmd.arg("--config").arg(&config).arg("--corpus").arg(&corpus).args(args);
        let out = cmd.output()?;
        ensure!(out.status.success(), "ossem {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    run(&["gen-corpus"])?;
    let check = |file: PathBuf, labels: &[&str]| -> Result<()> {
        let rows = AblationTable::parse_csv(&std::fs::read_to_string(&file)?)?;
        let got: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        ensure!(got == labels, "rows {got:?}, expected {labels:?}");
        for (label, values) in &rows {
            ensure!(values.iter().all(|v| v.is_finite()), "{label} has non-finite metrics");
        }
        Ok(())
    };
    let placement = dir.path().join("placement.csv");
    run(&["ablate-placement", "--out", placement.to_str().unwrap()])?;
    check(placement, &Placement::ALL.map(|p| p.as_str()))?;
    let techniques = dir.path().join("techniques.csv");
    run(&["ablate-techniques", "--out", techniques.to_str().unwrap()])?;
    check(techniques, &pipeline::technique_rows().map(|r| r.0))?;
    Ok("5 placement rows and 4 technique rows, all metrics finite".into())
}

fn random_checkpoint(r: &mut ChaCha8Rng) -> Result<Checkpoint> {
    let mut ps = ParamSet::<f32>::new();
    for i in 0..r.random_range(1..8) {
        let shape: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..7)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(r.random())).collect();
        let part = if r.random_bool(0.5) { Partition::Ssm } else { Partition::Se };
        ps.push(format!("p{i}.{}", r.random::<u16>()), part, Tensor::new(shape, data)?)?;
    }
    let mut ck = Checkpoint::new(
        ModelConfig::tiny(),
        StftConfig::new(64, 32),
        ps,
        Provenance::new(&r.random::<u64>().to_string(), r.random(), r.random_range(0..100)),
    );
    if r.random_bool(0.3) {
        ck.embedding = Some(SpeakerEmbedding::new("spk", unit_embedding(r))?);
    }
    Ok(ck)
}

fn same_bits(a: &Checkpoint, b: &Checkpoint) -> bool {
    let params = a.params.len() == b.params.len()
        && a.params.iter().zip(b.params.iter()).all(|(p, q)| {
            p.name() == q.name()
                && p.partition() == q.partition()
                && p.tensor.shape() == q.tensor.shape()
                && p.tensor.data().iter().zip(q.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let emb = match (&a.embedding, &b.embedding) {
        (None, None) => true,
        (Some(x), Some(y)) => {
            x.speaker_id == y.speaker_id && x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => false,
    };
    params && emb && a.model == b.model && a.stft == b.stft && a.provenance == b.provenance
}

fn persistence() -> Result<String> {
    let mut r = rng(11);
    let mut corruptions = 0;
    for i in 0..1000 {
        let ck = random_checkpoint(&mut r)?;
        let bytes = ck.to_bytes()?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("c.ckpt");
        ossem::checkpoint::save_checkpoint(&ck, &path)?;
        let back = ossem::checkpoint::load_checkpoint(&path)?;
        ensure!(same_bits(&ck, &back), "iteration {i}: round trip mismatch");

        let mut flipped = bytes.clone();
        let at = r.random_range(0..bytes.len());
        flipped[at] ^= r.random_range(1..=255u8);
        let mut extended = bytes.clone();
        extended.push(r.random());
        let cases = [
            ("byte flip", flipped),
            ("truncation", bytes[..r.random_range(0..bytes.len())].to_vec()),
            ("trailing byte", extended),
        ];
        for (what, bad) in cases {
            if Checkpoint::from_bytes(&bad).is_ok() {
                bail!("iteration {i}: {what} went undetected");
            }
            corruptions += 1;
        }
    }
    Ok(format!("1000 round trips bitwise exact, {corruptions} corruptions detected"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, result: Result<String>| match result {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
        Err(e) => {
            failed += 1;
            println!("FAIL {n:>2} {name}: {e:#}");
        }
    };
    report(1, "gradients", gradients());
    report(2, "causality", causality());
    report(3, "partitions", partitions());
    report(4, "schedule", schedule());
    report(5, "reduction", reduction());
    report(6, "rescaling", rescaling());
    report(7, "fomaml", fomaml());
    let start = Instant::now();
    let desk = train_desk();
    let elapsed = start.elapsed();
    report(8, "desk experiment", desk_experiment(&desk, elapsed));
    report(9, "ablations", ablations());
    report(10, "masks", masks(&desk));
    report(11, "persistence", persistence());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
