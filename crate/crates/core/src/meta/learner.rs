use super::{Rescale, RescaleSide, Utterance};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::rescale_ratio_mags;
use crate::model::{ossem_forward_tape, Bound, ModelConfig};

/// A differentiable loss over a set of examples, parameterised by a
/// [`crate::model::ParamSet`]. The training loops are written against this
/// trait so they can drive both the full network and small closed-form
/// models.
pub trait Learner<T: Real, E> {
    /// Records the mean loss over `examples` on `tape`.
    fn loss(&self, tape: &mut Tape<T>, params: &Bound, examples: &[E], rescale: Rescale) -> Result<Var>;
}

/// One training example for the full network.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub emb: &'a [f32],
    pub utt: &'a Utterance,
}

/// Mean per-utterance L1 loss of the enhancement network.
#[derive(Clone, Debug)]
pub struct OssemLearner {
    pub model: ModelConfig,
}

impl OssemLearner {
    pub fn new(model: ModelConfig) -> Self {
        Self { model }
    }
}

impl<'a> Learner<f32, Sample<'a>> for OssemLearner {
    fn loss(&self, tape: &mut Tape<f32>, params: &Bound, examples: &[Sample<'a>], rescale: Rescale) -> Result<Var> {
        if examples.is_empty() {
            return Err(Error::invalid("loss over an empty example set"));
        }
        let alpha = match rescale {
            Rescale::Off => None,
            Rescale::On(side) => {
                let a = rescale_ratio_mags(examples.iter().map(|s| (&s.utt.clean, &s.utt.noisy)))?;
                Some((side, a.alpha() as f32))
            }
        };
        let mut pairs = Vec::with_capacity(examples.len());
        for s in examples {
            let emb = tape.constant(Tensor::new(vec![1, s.emb.len()], s.emb.to_vec())?);
            let mut x = tape.constant(s.utt.noisy.clone());
            if let Some((RescaleSide::Input, a)) = alpha {
                x = tape.scale(x, a)?;
            }
            let mut pred = ossem_forward_tape(tape, params, &self.model, Some(emb), x)?.out;
            if let Some((RescaleSide::Output, a)) = alpha {
                pred = tape.scale(pred, a)?;
            }
            let y = tape.constant(s.utt.clean.clone());
            pairs.push((pred, y));
        }
        tape.l1_set_loss(&pairs)
    }
}
