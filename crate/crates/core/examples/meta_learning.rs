//! One meta-iteration by hand: adapt a copy on a speaker's support set,
//! then update the original weights from the query set.

use ossem::autodiff::Tensor;
use ossem::meta::{inner_adapt, outer_step, OssemLearner, Rescale, Sample, Utterance};
use ossem::model::{ModelConfig, ParamSet, Partition};

fn utterance(id: &str, phase: f32) -> ossem::Result<Utterance> {
    let clean: Vec<f32> = (0..20 * 33).map(|i| 0.5 + 0.4 * ((i as f32) * 0.21 + phase).sin()).collect();
    let noisy: Vec<f32> = clean.iter().enumerate().map(|(i, c)| c + 0.3 * ((i * 37 % 17) as f32 / 17.0)).collect();
    Ok(Utterance {
        id: id.into(),
        noisy: Tensor::new(vec![20, 33], noisy)?,
        clean: Tensor::new(vec![20, 33], clean)?,
    })
}

fn main() -> ossem::Result<()> {
    let model = ModelConfig::tiny();
    let learner = OssemLearner::new(model.clone());
    let mut theta = ParamSet::<f32>::init(&model, 2)?;
    let emb = vec![0.072; 192];
    let utts = [utterance("s", 0.0)?, utterance("q1", 1.0)?, utterance("q2", 2.0)?];
    let support = [Sample { emb: &emb, utt: &utts[0] }];
    let query = [Sample { emb: &emb, utt: &utts[1] }, Sample { emb: &emb, utt: &utts[2] }];

    let adapted = inner_adapt(&learner, &theta, &support, 0.1, 1, true, Rescale::Off)?;
    println!("support loss before the inner step {:.5}", adapted.support_loss.unwrap_or(f64::NAN));
    let se_same = adapted.params.partition_hash(Partition::Se) == theta.partition_hash(Partition::Se);
    println!("enhancer untouched by the inner step: {se_same}");

    let before = theta.clone();
    let q = outer_step(&learner, &mut theta, &adapted.params, &query, 1e-3)?;
    println!("query loss at adapted weights {q:.5}");
    println!("outer step changed the enhancer: {}", before.partition_hash(Partition::Se) != theta.partition_hash(Partition::Se));
    Ok(())
}
