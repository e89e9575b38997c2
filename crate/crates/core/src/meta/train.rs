use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::learner::{Learner, OssemLearner, Sample};
use super::tasks::{make_tasks, MetaTask};
use super::{Batching, Optimizer, PretrainConfig, Rescale, TrainConfig, TrainSet};
use crate::autodiff::{Real, Tape};
use crate::error::{Error, Result};
use crate::model::{ParamSet, Partition};

/// Per-epoch training record, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ilr: f64,
    /// Support loss before adaptation; `None` when the inner loop was skipped.
    pub mean_support_loss: Option<f64>,
    pub mean_query_loss: f64,
    pub wall_ms: u64,
}

/// Adapted copy of a parameter set.
#[derive(Clone, Debug)]
pub struct Adapted<T> {
    pub params: ParamSet<T>,
    /// Support loss at the unadapted weights, when a step was taken.
    pub support_loss: Option<f64>,
}

/// Loss value and gradients (aligned with `params`) for the partitions in
/// `trainable`; other parameters get `None`.
pub fn loss_and_grads<T: Real, E, L: Learner<T, E>>(
    learner: &L,
    params: &ParamSet<T>,
    examples: &[E],
    trainable: &[Partition],
    rescale: Rescale,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, trainable);
    let loss = learner.loss(&mut tape, &bound, examples, rescale)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss", index: 0 });
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect_grads(&mut grads)))
}

/// `k` gradient-descent steps with rate `ilr` on a copy of `params`.
///
/// With `ssm_only` only the mask network moves. A zero rate or zero steps
/// returns an exact copy without evaluating the loss.
pub fn inner_adapt<T: Real, E, L: Learner<T, E>>(
    learner: &L,
    params: &ParamSet<T>,
    support: &[E],
    ilr: T,
    k: usize,
    ssm_only: bool,
    rescale: Rescale,
) -> Result<Adapted<T>> {
    let mut adapted = params.clone();
    if ilr == T::zero() || k == 0 {
        return Ok(Adapted {
            params: adapted,
            support_loss: None,
        });
    }
    let partitions = if ssm_only { vec![Partition::Ssm] } else { params.partitions() };
    let mut first = None;
    for _ in 0..k {
        let (loss, grads) = loss_and_grads(learner, &adapted, support, &partitions, rescale)?;
        first.get_or_insert(loss);
        adapted.sgd_step(&grads, ilr, &partitions)?;
    }
    Ok(Adapted {
        params: adapted,
        support_loss: first,
    })
}

/// First-order outer update: the query-loss gradient taken at `adapted` is
/// applied to `theta` across all partitions. Returns the query loss.
pub fn outer_step<T: Real, E, L: Learner<T, E>>(
    learner: &L,
    theta: &mut ParamSet<T>,
    adapted: &ParamSet<T>,
    query: &[E],
    olr: T,
) -> Result<f64> {
    let partitions = adapted.partitions();
    let (loss, grads) = loss_and_grads(learner, adapted, query, &partitions, Rescale::Off)?;
    theta.sgd_step(&grads, olr, &partitions)?;
    Ok(loss)
}

/// Plain gradient step on `batch`; identical to [`outer_step`] with
/// `adapted == theta`.
pub fn supervised_step<T: Real, E, L: Learner<T, E>>(
    learner: &L,
    theta: &mut ParamSet<T>,
    batch: &[E],
    lr: T,
) -> Result<f64> {
    let partitions = theta.partitions();
    let (loss, grads) = loss_and_grads(learner, theta, batch, &partitions, Rescale::Off)?;
    theta.sgd_step(&grads, lr, &partitions)?;
    Ok(loss)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient list does not match parameter set"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}

fn task_samples<'a>(data: &'a TrainSet, task: &MetaTask) -> (Vec<Sample<'a>>, Vec<Sample<'a>>) {
    let pick = |ix: &[usize]| ix.iter().map(|&u| data.sample(task.speaker, u)).collect();
    (pick(&task.support), pick(&task.query))
}

fn meta_iteration(
    cfg: &TrainConfig,
    learner: &OssemLearner,
    theta: &mut ParamSet<f32>,
    support: &[Sample],
    query: &[Sample],
    ilr: f64,
    ssm_only: bool,
) -> Result<(Option<f64>, f64)> {
    let adapted = inner_adapt(learner, theta, support, ilr as f32, cfg.inner_steps, ssm_only, cfg.inner_rescale())?;
    let q = outer_step(learner, theta, &adapted.params, query, cfg.olr as f32)?;
    Ok((adapted.support_loss, q))
}

fn at(epoch: usize, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Training {
        epoch,
        iteration,
        source: Box::new(e),
    }
}

/// Standard mini-batch training of every parameter.
///
/// With [`Batching::PerSpeaker`] each batch is the query set of the task the
/// meta loop would draw with the same seed (one support utterance per task),
/// so SGD pretraining follows the meta loop's zero-inner-rate trajectory.
pub fn supervised_pretrain(
    cfg: &PretrainConfig,
    learner: &OssemLearner,
    data: &TrainSet,
    init: ParamSet<f32>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamSet<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut theta = init;
    let mut logs = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || cfg.iterations_per_epoch == 0 {
        return Ok((theta, logs));
    }
    let mut tasks = match cfg.batching {
        Batching::PerSpeaker => Some(make_tasks(data, 1, cfg.batch_size, cfg.seed)?),
        Batching::Mixed => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flat: Vec<(usize, usize)> = data
        .speakers
        .iter()
        .enumerate()
        .flat_map(|(s, sp)| (0..sp.utterances.len()).map(move |u| (s, u)))
        .collect();
    let mut adam = Adam::new(cfg.lr);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for it in 0..cfg.iterations_per_epoch {
            let batch: Vec<Sample> = match tasks.as_mut() {
                Some(tasks) => task_samples(data, &tasks.next_task()).1,
                None => (0..cfg.batch_size)
                    .map(|_| {
                        let (s, u) = flat[rng.random_range(0..flat.len())];
                        data.sample(s, u)
                    })
                    .collect(),
            };
            let loss = match cfg.optimizer {
                Optimizer::Sgd => supervised_step(learner, &mut theta, &batch, cfg.lr as f32),
                Optimizer::Adam => {
                    let parts = theta.partitions();
                    loss_and_grads(learner, &theta, &batch, &parts, Rescale::Off)
                        .and_then(|(l, g)| adam.step(&mut theta, &g).map(|_| l))
                }
            }
            .map_err(at(epoch, it))?;
            total += loss;
        }
        let log = EpochLog {
            epoch,
            ilr: 0.0,
            mean_support_loss: None,
            mean_query_loss: total / cfg.iterations_per_epoch as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((theta, logs))
}

/// Speaker-task meta-learning from `init`.
///
/// For each epoch the inner rate comes from [`TrainConfig::ilr`]; each
/// iteration draws a task, adapts a copy on the support set and applies the
/// first-order query gradient to the running weights.
pub fn meta_train(
    cfg: &TrainConfig,
    learner: &OssemLearner,
    data: &TrainSet,
    init: ParamSet<f32>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamSet<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut theta = init;
    let mut logs = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || cfg.iterations_per_epoch == 0 {
        return Ok((theta, logs));
    }
    let mut tasks = make_tasks(data, cfg.n_support, cfg.n_query, cfg.seed)?;
    let ssm_only = cfg.techniques.speaker_inner_loop && theta.uses_mask();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let ilr = cfg.ilr(epoch)?;
        let (mut s_total, mut s_count, mut q_total) = (0.0, 0usize, 0.0);
        for it in 0..cfg.iterations_per_epoch {
            let task = tasks.next_task();
            let (support, query) = task_samples(data, &task);
            let (s, q) = meta_iteration(cfg, learner, &mut theta, &support, &query, ilr, ssm_only).map_err(at(epoch, it))?;
            if let Some(s) = s {
                s_total += s;
                s_count += 1;
            }
            q_total += q;
        }
        let log = EpochLog {
            epoch,
            ilr,
            mean_support_loss: (s_count > 0).then(|| s_total / s_count as f64),
            mean_query_loss: q_total / cfg.iterations_per_epoch as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((theta, logs))
}
